"""Command-line entry point: ``hla {train,quantize,eval,export,inspect,gen-data}``.

Normal output is ``key=value`` lines on stdout; diagnostics go to stderr at
the level named by ``HLA_LOG`` (error, info, debug).
"""

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import _kernels as K
from .checkpoint import MAGIC as CKPT_MAGIC, atomic_write, checkpoint_load, checkpoint_save
from .config import DataConfig, load_config
from .data import load_idx_pair, write_idx_images, write_idx_labels
from .errors import HLAError
from .packed import HTQ_MAGIC, KIND_TERNARY, export_model, import_model, unpack
from .quantizer import column_cosines, ternary_quantize, threshold_from_sparsity
from .trainer import evaluate, fine_tune, load_data, new_run, pretrain, quantize_train

log = logging.getLogger("hla")

CHECKPOINT_NAME = "checkpoint.hlackpt"
METRICS_NAME = "metrics.csv"
MANIFEST_NAME = "manifest.json"
HIST_BINS = 101


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("HLA_LOG", "error").lower(), logging.ERROR
    )
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def _version_string():
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"hla-{__version__}" + (f"-g{desc}" if desc else "")


def _emit(**pairs):
    for k, v in pairs.items():
        print(f"{k}={v}")


def _fingerprint(train, test):
    return train.fingerprint()[:32] + test.fingerprint()[:32]


def _config_with_seed(path, seed):
    cfg = load_config(path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _writer(out):
    def on_epoch(state):
        checkpoint_save(state, out / CHECKPOINT_NAME)
        atomic_write(out / METRICS_NAME, state.metrics.to_csv().encode())
    return on_epoch


def _finish(state, out, started, train, test, command):
    _writer(out)(state)
    manifest = {
        "command": command,
        "config": state.config.to_dict(),
        "dataset_fingerprint": _fingerprint(train, test),
        "version": _version_string(),
        "kernel_backend": K.BACKEND,
        "threads": state.config.threads,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {"checkpoint": str(out / CHECKPOINT_NAME), "metrics": str(out / METRICS_NAME)},
    }
    atomic_write(out / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True).encode())


def cmd_train(args):
    cfg = _config_with_seed(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    train, test = load_data(cfg.data)
    if args.resume and (out / CHECKPOINT_NAME).exists():
        state = checkpoint_load(out / CHECKPOINT_NAME)
    else:
        state = new_run(cfg, train)
    on_epoch = _writer(out)
    pretrain(state, train, test, on_epoch)
    baseline = evaluate(state.net, test, False)
    fine_tune(state, train, test, on_epoch)
    _finish(state, out, started, train, test, "train")
    _emit(epochs=len(state.metrics.records), test_acc=f"{evaluate(state.net, test, False):.4f}",
          baseline_acc=f"{baseline:.4f}", checkpoint=out / CHECKPOINT_NAME)
    return 0


def cmd_quantize(args):
    state = checkpoint_load(args.checkpoint)
    if args.config:
        cfg = _config_with_seed(args.config, args.seed)
        if state.progress["quantize_initialized"] is False:
            state.config = cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    train, test = load_data(state.config.data)
    quantize_train(state, train, test, _writer(out))
    _finish(state, out, started, train, test, "quantize")
    sparsities = [f"{trip[1]:.4f}" for trip in state.metrics.records[-1].layers] if state.metrics.records else []
    _emit(test_acc=f"{evaluate(state.net, test, True):.4f}", sparsity=",".join(sparsities),
          checkpoint=out / CHECKPOINT_NAME)
    return 0


def _load_artifact(path):
    path = Path(path)
    head = path.read_bytes()[:8]
    if head.startswith(HTQ_MAGIC):
        return "htq", import_model(path)
    if head.startswith(CKPT_MAGIC):
        return "checkpoint", checkpoint_load(path)
    raise HLAError(f"{path} is neither a checkpoint nor an .htq model")


def _eval_dataset(args, state):
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise HLAError("--images and --labels must be given together")
        return load_idx_pair(args.images, args.labels, args.num_classes)
    if args.config:
        return load_data(load_config(args.config).data)[1]
    if state is not None:
        return load_data(state.config.data)[1]
    raise HLAError("no dataset: pass --config or --images/--labels")


def cmd_eval(args):
    kind, obj = _load_artifact(args.model)
    ds = _eval_dataset(args, obj if kind == "checkpoint" else None)
    if kind == "htq":
        acc = obj.evaluate(ds)
    else:
        acc = evaluate(obj.net, ds, args.ternary)
    _emit(accuracy=f"{acc:.4f}")
    return 0


def cmd_export(args):
    state = checkpoint_load(args.checkpoint)
    frozen = export_model(state.net, args.output)
    rep = frozen.size_report()
    _emit(path=args.output, **rep, code_reduction=f"{rep['dense_bytes'] / max(rep['code_bytes'], 1):.2f}")
    return 0


def _histogram(values):
    counts, edges = np.histogram(np.clip(values, -1.0, 1.0), bins=HIST_BINS, range=(-1.0, 1.0))
    lines = ["bin_left,bin_right,count"]
    lines += [f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(counts[i])}" for i in range(HIST_BINS)]
    return "\n".join(lines) + "\n"


def _layout_sizes(shapes):
    """Byte counts of the .htq encoding for ``[(ternary?, rows, cols), ...]``."""
    codes = sum(-(-r * c // 4) for tern, r, c in shapes if tern)
    scales = sum(8 * c for tern, r, c in shapes if tern)
    exceptions = sum(8 * r * c for tern, r, c in shapes if not tern)
    header = 12 + 10 * len(shapes) + 4
    return {
        "dense_bytes": sum(8 * r * c for _, r, c in shapes),
        "packed_file_bytes": header + codes + scales + exceptions,
        "code_bytes": codes,
        "scale_bytes": scales,
        "dense_exception_bytes": exceptions,
        "header_bytes": header,
    }


def cmd_inspect(args):
    kind, obj = _load_artifact(args.artifact)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    shapes = []
    if kind == "htq":
        for k, (lk, payload, _) in enumerate(obj.layers):
            if lk == KIND_TERNARY:
                tc = unpack(payload)
                w = tc.dense()
                summary[f"layer{k}_sparsity"] = repr(tc.sparsity())
                _write_column(out / f"layer{k}_alphas.csv", "alpha", tc.alphas)
            else:
                w = payload
            atomic_write(out / f"layer{k}_hist.csv", _histogram(w.ravel()).encode())
            shapes.append((lk == KIND_TERNARY, w.shape[0], w.shape[1]))
    else:
        net = obj.net
        for k, layer in enumerate(net.layers):
            w = layer.weights
            atomic_write(out / f"layer{k}_hist.csv", _histogram(w.ravel()).encode())
            shapes.append((layer.quantize_eligible, w.shape[0], w.shape[1]))
            if not layer.quantize_eligible:
                continue
            delta = layer.delta_bar if layer.mode == "ternary" else threshold_from_sparsity(w, args.t)
            tc = ternary_quantize(w, delta, layer=k)
            summary[f"layer{k}_delta"] = repr(delta)
            summary[f"layer{k}_sparsity"] = repr(tc.sparsity())
            summary[f"layer{k}_cosine"] = repr(float(np.mean(column_cosines(w, tc))))
            summary[f"layer{k}_mode_mass"] = repr(mode_mass(w, tc))
            _write_column(out / f"layer{k}_alphas.csv", "alpha", tc.alphas)
    summary.update({k: str(v) for k, v in _layout_sizes(shapes).items()})
    summary["bins"] = str(HIST_BINS)
    atomic_write(out / "summary.txt", "".join(f"{k}={v}\n" for k, v in summary.items()).encode())
    _emit(**summary)
    return 0


def _write_column(path, name, values):
    atomic_write(path, (name + "\n" + "".join(f"{float(v)!r}\n" for v in values)).encode())


def mode_mass(w, tc, width=0.05):
    """Fraction of entries within ``width`` of their column's {-alpha, 0, +alpha}."""
    a = tc.alphas[None, :]
    d = np.minimum(np.minimum(np.abs(w), np.abs(w - a)), np.abs(w + a))
    return float(np.mean(d <= width))


def cmd_gen_data(args):
    data_cfg = load_config(args.config).data if args.config else DataConfig()
    if args.seed is not None:
        data_cfg = dataclasses.replace(data_cfg, seed=args.seed)
    data_cfg = dataclasses.replace(data_cfg, kind="blobs")
    train, test = load_data(data_cfg)
    lo = min(train.features.min(), test.features.min())
    hi = max(train.features.max(), test.features.max())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", train), ("test", test)):
        scaled = (ds.features - lo) / (hi - lo)
        atomic_write(out / f"{name}-images.idx3-ubyte", write_idx_images(scaled.reshape(len(ds), 1, -1)))
        atomic_write(out / f"{name}-labels.idx1-ubyte", write_idx_labels(ds.labels))
    _emit(out=out, train=len(train), test=len(test), feature_dim=train.feature_dim)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads (only 1 is supported)")
    p = argparse.ArgumentParser(prog="hla", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="pretrain + sparsity-scheduled fine-tuning")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantize", parents=[common], help="ternary quantisation from a fine-tuned checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", parents=[common], help="print top-1 accuracy of a checkpoint or .htq model")
    s.add_argument("model")
    s.add_argument("--config")
    s.add_argument("--images")
    s.add_argument("--labels")
    s.add_argument("--num-classes", type=int)
    s.add_argument("--ternary", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", parents=[common], help="write a packed .htq model")
    s.add_argument("checkpoint")
    s.add_argument("output")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("inspect", parents=[common], help="weight histograms, cosines, sparsity and size report")
    s.add_argument("artifact")
    s.add_argument("--out", required=True)
    s.add_argument("--t", type=float, default=0.5, help="sparsity target for full-precision layers")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("gen-data", parents=[common], help="write a blobs dataset as IDX files")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads != 1:
        print("error: only --threads 1 is supported", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (HLAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
