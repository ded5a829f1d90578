"""Binary run checkpoints.

Layout (little-endian)::

    b"HLACKPT1" | u32 version | u32 header_len | header (UTF-8 JSON)
    | per layer: weights f64[rows*cols] (column-major), velocity f64[rows*cols]
    | u32 CRC32C of everything before it

The JSON header carries the config, progress counters, RNG state, per-layer
metadata (mode, thresholds) and the full metrics history, so a resumed run
continues exactly where the saved one stopped.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import _kernels as K
from .config import config_from_dict
from .errors import ChecksumError, FormatError, TruncatedError, VersionError, WrongMagicError
from .layers import HyperLayer, Network
from .numerics import rng_from_state, rng_state
from .trainer import RunState, TrainMetrics

MAGIC = b"HLACKPT1"
VERSION = 1


def atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(state):
    layers = []
    payload = bytearray()
    for layer in state.net.layers:
        layers.append({
            "rows": layer.in_dim,
            "cols": layer.out_dim,
            "activation": layer.activation,
            "quantize_eligible": layer.quantize_eligible,
            "mode": layer.mode,
            "delta_bar": layer.delta_bar,
            "delta": layer.delta,
        })
        payload += layer.weights.astype("<f8").tobytes(order="F")
        payload += layer.velocity.astype("<f8").tobytes(order="F")
    header = {
        "config": state.config.to_dict(),
        "progress": state.progress,
        "rng": rng_state(state.rng),
        "layers": layers,
        "metrics": state.metrics.to_json(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(head)) + head + bytes(payload)
    return body + struct.pack("<I", K.crc32c(body))


def checkpoint_save(state, path):
    atomic_write(path, checkpoint_bytes(state))


def verify_crc(data, kind):
    if len(data) < 4:
        raise TruncatedError(f"{kind} file is too short")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    actual = K.crc32c(data[:-4])
    if stored != actual:
        raise ChecksumError(f"{kind} checksum mismatch: stored 0x{stored:08x}, computed 0x{actual:08x}")


def checkpoint_from_bytes(data):
    data = bytes(data)
    if not data.startswith(MAGIC):
        if MAGIC.startswith(data):
            raise TruncatedError("checkpoint file is truncated")
        raise WrongMagicError("not a checkpoint file (bad magic)")
    verify_crc(data, "checkpoint")
    if len(data) < len(MAGIC) + 12:
        raise TruncatedError("checkpoint file is truncated")
    version, head_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    off = len(MAGIC) + 8
    try:
        header = json.loads(data[off:off + head_len])
    except ValueError as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    off += head_len
    layers = []
    for meta in header["layers"]:
        count = meta["rows"] * meta["cols"]
        arrays = []
        for _ in range(2):
            if off + 8 * count > len(data) - 4:
                raise TruncatedError("checkpoint payload is truncated")
            flat = np.frombuffer(data, dtype="<f8", count=count, offset=off)
            arrays.append(np.ascontiguousarray(flat.reshape(meta["cols"], meta["rows"]).T, dtype=np.float64))
            off += 8 * count
        layers.append(HyperLayer(
            arrays[0],
            activation=meta["activation"],
            quantize_eligible=meta["quantize_eligible"],
            mode=meta["mode"],
            delta_bar=meta["delta_bar"],
            delta=meta["delta"],
            velocity=arrays[1],
        ))
    if off != len(data) - 4:
        raise FormatError("checkpoint has trailing bytes after the layer payload")
    return RunState(
        net=Network(layers),
        config=config_from_dict(header["config"]),
        rng=rng_from_state(header["rng"]),
        metrics=TrainMetrics.from_json(header["metrics"]),
        progress=header["progress"],
    )


def checkpoint_load(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
