"""Two-phase training: sparsity-scheduled fine-tuning, then ternary quantisation.

Both phases mutate a :class:`RunState` in place and can be resumed from any
epoch boundary (see :mod:`hla.checkpoint`).
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .config import DataConfig
from .data import BlobSpec, Dataset, batches, generate_blobs, load_idx_pair, train_test_split
from .errors import DivergenceError, HLAError
from .layers import Network
from .numerics import lr_at, make_rng
from .objective import layer_thresholds, objective_phase1, objective_phase2
from .quantizer import column_cosines, ternary_quantize, threshold_from_sparsity, update_delta

log = logging.getLogger("hla")

EVAL_CHUNK = 1024


@dataclass
class MetricRecord:
    epoch: int
    phase: str
    t: float  # NaN outside fine-tuning
    task_loss: float
    reg_loss: float
    train_acc: float
    test_acc: float
    layers: list  # [(delta, sparsity, cosine)] per eligible layer


@dataclass
class TrainMetrics:
    layer_ids: list
    records: list = field(default_factory=list)

    def header(self):
        cols = ["epoch", "phase", "t", "task_loss", "reg_loss", "train_acc", "test_acc"]
        for k in self.layer_ids:
            cols += [f"L{k}_delta", f"L{k}_sparsity", f"L{k}_cosine"]
        return cols

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.records:
            w.writerow(_record_row(r))
        return buf.getvalue()

    def to_json(self):
        return {"layer_ids": list(self.layer_ids), "records": [_record_json(r) for r in self.records]}

    @classmethod
    def from_json(cls, raw):
        recs = [
            MetricRecord(**{**r, "t": _unfmt(r["t"]), "layers": [tuple(_unfmt(v) for v in trip) for trip in r["layers"]]})
            for r in raw["records"]
        ]
        return cls(list(raw["layer_ids"]), recs)


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _unfmt(v):
    return float("nan") if v == "" else float(v)


def _record_row(r):
    row = [r.epoch, r.phase, _fmt(r.t), _fmt(r.task_loss), _fmt(r.reg_loss), _fmt(r.train_acc), _fmt(r.test_acc)]
    for trip in r.layers:
        row += [_fmt(v) for v in trip]
    return row


def _record_json(r):
    return {
        "epoch": r.epoch, "phase": r.phase, "t": _fmt(r.t),
        "task_loss": r.task_loss, "reg_loss": r.reg_loss,
        "train_acc": r.train_acc, "test_acc": r.test_acc,
        "layers": [[_fmt(v) for v in trip] for trip in r.layers],
    }


@dataclass
class RunState:
    net: Network
    config: TrainConfig
    rng: np.random.Generator
    metrics: TrainMetrics
    progress: dict = field(default_factory=lambda: {
        "pretrain_epoch": 0, "fine_tune_epoch": 0, "quantize_epoch": 0, "quantize_initialized": False,
    })


def load_data(cfg: DataConfig, split_seed=None):
    """Returns ``(train, test)`` for the configured dataset."""
    if cfg.kind == "blobs":
        spec = BlobSpec(cfg.num_classes, cfg.feature_dim, cfg.samples_per_class, cfg.separation, cfg.sigma, cfg.seed)
        return train_test_split(generate_blobs(spec), cfg.seed if split_seed is None else split_seed, cfg.test_fraction)
    if cfg.kind == "idx":
        train = load_idx_pair(cfg.train_images, cfg.train_labels, cfg.num_classes)
        test = load_idx_pair(cfg.test_images, cfg.test_labels, cfg.num_classes)
        return train, test
    raise HLAError(f"unknown dataset kind {cfg.kind!r}")


def new_run(config, train):
    """Fresh run state: random unit-column network sized for ``train``."""
    rng = make_rng(config.seed)
    dims = [train.feature_dim, *config.hidden, train.num_classes]
    net = Network.random(dims, rng, config.eligibility)
    return RunState(net, config, rng, TrainMetrics(net.eligible()))


def evaluate(net, ds, use_ternary):
    """Top-1 accuracy with the network in the requested mode (mode is restored)."""
    if len(ds) == 0:
        raise HLAError("cannot evaluate on an empty dataset")
    saved = [layer.mode for layer in net.layers]
    net.set_mode("ternary" if use_ternary else "full_precision")
    try:
        correct = 0
        for start in range(0, len(ds), EVAL_CHUNK):
            pred = net.predict(ds.features[start:start + EVAL_CHUNK])
            correct += int(np.count_nonzero(pred == ds.labels[start:start + EVAL_CHUNK]))
    finally:
        for layer, mode in zip(net.layers, saved):
            layer.mode = mode
    return correct / len(ds)


def layer_stats(net, thresholds):
    """``(delta, sparsity, mean cosine)`` per eligible layer at the given thresholds."""
    out = []
    for k in net.eligible():
        w = net.layers[k].weights
        tc = ternary_quantize(w, thresholds[k], layer=k)
        out.append((thresholds[k], tc.sparsity(), float(np.mean(column_cosines(w, tc)))))
    return out


def _check_finite(report, phase, epoch):
    if not (math.isfinite(report.task_loss) and math.isfinite(report.reg_loss)):
        raise DivergenceError(f"non-finite loss in {phase} epoch {epoch}: {report.task_loss}, {report.reg_loss}")


def _sgd_all(state, grads, lr):
    cfg = state.config
    for layer, g in zip(state.net.layers, grads):
        layer.sgd_step(g, lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _epoch(state, train, test, phase, phase_epoch, t=float("nan")):
    cfg = state.config
    net = state.net
    lr = lr_at(cfg.lr, phase_epoch)
    lr_delta = cfg.delta_lr_scale * lr
    task_sum = reg_sum = 0.0
    seen = 0
    for xb, yb in batches(train, cfg.batch_size, state.rng):
        if phase == "pretrain":
            report, grads = objective_phase1(net, xb, yb, thresholds=[None] * len(net.layers))
        elif phase == "fine_tune":
            report, grads = objective_phase1(
                net, xb, yb, thresholds=[layer.delta if layer.quantize_eligible else None for layer in net.layers]
            )
        else:
            report, grads, dgrads = objective_phase2(net, xb, yb, rescale=cfg.rescale)
        _check_finite(report, phase, phase_epoch)
        _sgd_all(state, grads, lr)
        if phase == "quantize":
            for layer, g in zip(net.layers, dgrads):
                if g is not None:
                    layer.delta_bar = update_delta(layer.delta_bar, g, lr_delta, cfg.delta_update_mode)
        task_sum += report.task_loss * len(yb)
        reg_sum += report.reg_loss * len(yb)
        seen += len(yb)

    ternary = phase == "quantize"
    if phase == "fine_tune":
        thresholds = [layer.delta for layer in net.layers]
        stats = layer_stats(net, thresholds)
    elif phase == "quantize":
        stats = layer_stats(net, [layer.delta_bar for layer in net.layers])
    else:
        stats = [(float("nan"),) * 3 for _ in net.eligible()]
    rec = MetricRecord(
        epoch=len(state.metrics.records) + 1,
        phase=phase,
        t=t,
        task_loss=task_sum / seen,
        reg_loss=reg_sum / seen,
        train_acc=evaluate(net, train, ternary),
        test_acc=evaluate(net, test, ternary),
        layers=stats,
    )
    state.metrics.records.append(rec)
    log.info("%s epoch %d: loss=%.5f reg=%.5f test_acc=%.4f", phase, rec.epoch, rec.task_loss, rec.reg_loss, rec.test_acc)
    return rec


def pretrain(state, train, test, on_epoch=None):
    """Plain full-precision hyperspherical training (the baseline)."""
    state.net.set_mode("full_precision")
    while state.progress["pretrain_epoch"] < state.config.pretrain_epochs:
        _epoch(state, train, test, "pretrain", state.progress["pretrain_epoch"])
        state.progress["pretrain_epoch"] += 1
        if on_epoch:
            on_epoch(state)
    return state


def fine_tune(state, train, test, on_epoch=None, max_epochs=None):
    """Minimise task loss + regulariser while the sparsity target rises.

    The threshold for each stage is fixed at stage entry.  ``max_epochs``
    stops early (for checkpoint/resume); call again to continue.
    """
    cfg = state.config
    net = state.net
    net.set_mode("full_precision")
    stages = cfg.schedule.stages()
    per_stage = cfg.schedule.epochs_per_stage
    total = len(stages) * per_stage
    done = 0
    while state.progress["fine_tune_epoch"] < total:
        if max_epochs is not None and done >= max_epochs:
            break
        e = state.progress["fine_tune_epoch"]
        t = stages[e // per_stage]
        if e % per_stage == 0:
            for layer, d in zip(net.layers, layer_thresholds(net, t, cfg.threshold_scope)):
                layer.delta = 0.0 if d is None else d
        _epoch(state, train, test, "fine_tune", e, t)
        state.progress["fine_tune_epoch"] += 1
        done += 1
        if on_epoch:
            on_epoch(state)
    return state


def init_quantization(state):
    """Switch eligible layers to ternary mode with ``delta_bar = T(delta_init_t)``."""
    cfg = state.config
    net = state.net
    eligible = net.eligible()
    if cfg.threshold_scope == "global" and eligible:
        shared = threshold_from_sparsity([net.layers[k].weights for k in eligible], cfg.delta_init_t)
        inits = {k: shared for k in eligible}
    else:
        inits = {k: threshold_from_sparsity(net.layers[k].weights, cfg.delta_init_t) for k in eligible}
    for k, d in inits.items():
        net.layers[k].delta_bar = d
        ternary_quantize(net.layers[k].weights, d, layer=k)
    for layer in net.layers:
        layer.velocity = np.zeros_like(layer.weights)
    net.set_mode("ternary")
    state.progress["quantize_initialized"] = True


def quantize_train(state, train, test, on_epoch=None, max_epochs=None):
    """Ternary forward, scaled-STE updates of ``W``, learned ``delta_bar``."""
    if not state.progress["quantize_initialized"]:
        init_quantization(state)
    state.net.set_mode("ternary")
    done = 0
    while state.progress["quantize_epoch"] < state.config.quantize_epochs:
        if max_epochs is not None and done >= max_epochs:
            break
        _epoch(state, train, test, "quantize", state.progress["quantize_epoch"])
        state.progress["quantize_epoch"] += 1
        done += 1
        if on_epoch:
            on_epoch(state)
    return state


def realized_sparsity(net):
    """Zero fraction over all quantised weights (eligible layers at their delta_bar)."""
    zeros = total = 0
    for k in net.eligible():
        tc = net.layers[k].quantized(k)
        zeros += tc.signs.size - np.count_nonzero(tc.signs)
        total += tc.signs.size
    return zeros / total if total else 0.0


def mean_cosine_at(net, t):
    """Mean column cosine between ``W`` and ``Ternary(W, T(t))`` over eligible layers."""
    vals = []
    for k in net.eligible():
        w = net.layers[k].weights
        vals.append(column_cosines(w, ternary_quantize(w, threshold_from_sparsity(w, t), layer=k)))
    return float(np.mean(np.concatenate(vals)))


__all__ = [
    "Dataset", "MetricRecord", "RunState", "TrainMetrics", "evaluate", "fine_tune", "init_quantization",
    "layer_stats", "load_data", "mean_cosine_at", "new_run", "pretrain", "quantize_train", "realized_sparsity",
]
