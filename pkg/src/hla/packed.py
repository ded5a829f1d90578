"""2-bit packed ternary matrices, multiply-free inference, and the ``.htq`` model file.

Code layout: entry ``k`` of the column-major sign sequence sits in bits
``2*(k % 4)`` and ``2*(k % 4) + 1`` of byte ``k // 4``; ``00`` is 0, ``01``
is +1, ``10`` is -1 and ``11`` is reserved.

``.htq`` layout (little-endian)::

    b"HTQ1" | u32 version | u32 layer_count
    | per layer: u8 kind (0 dense, 1 ternary) | u32 rows | u32 cols
    |            dense:   f64[rows*cols] column-major
    |            ternary: f64[cols] alphas, u8[ceil(rows*cols/4)] codes
    |            u8 activation (0 identity, 1 relu)
    | u32 CRC32C of everything before it
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K
from .checkpoint import atomic_write, verify_crc
from .errors import CorruptDataError, DimensionError, FormatError, HLAError, TruncatedError, VersionError, WrongMagicError
from .layers import normalize_rows
from .quantizer import TernaryColumnSet

HTQ_MAGIC = b"HTQ1"
HTQ_VERSION = 1
KIND_DENSE, KIND_TERNARY = 0, 1
ACT_TAGS = {"identity": 0, "relu": 1}
ACT_NAMES = {v: k for k, v in ACT_TAGS.items()}


@dataclass
class PackedTernaryMatrix:
    rows: int
    cols: int
    codes: np.ndarray  # uint8, ceil(rows*cols/4)
    alphas: np.ndarray  # float64, (cols,)

    @property
    def code_bytes(self):
        return -(-self.rows * self.cols // 4)


def pack_signs(signs_colmajor):
    """Packs a flat column-major sign sequence into 2-bit codes."""
    return K.pack_codes(np.ascontiguousarray(signs_colmajor, dtype=np.int8))


def unpack_signs(codes, count, base_offset=0):
    signs, bad = K.unpack_codes(np.ascontiguousarray(codes, dtype=np.uint8), count)
    if bad >= 0:
        raise CorruptDataError(f"reserved code 0b11 in byte at offset {base_offset + bad}", base_offset + bad)
    return signs


def pack(tc):
    return PackedTernaryMatrix(
        tc.rows, tc.cols, pack_signs(tc.signs.ravel(order="F")), np.array(tc.alphas, dtype=np.float64)
    )


def unpack(p, base_offset=0):
    signs = unpack_signs(p.codes, p.rows * p.cols, base_offset).reshape(p.cols, p.rows).T
    return TernaryColumnSet(np.ascontiguousarray(signs), np.array(p.alphas, dtype=np.float64))


def packed_matvec(p, x):
    """``alpha_j * (sum of x_i under +1 codes - sum under -1 codes)``, adds only."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.rows,):
        raise DimensionError("packed_matvec input length", p.rows, x.shape)
    return K.packed_matmul(p.codes, p.alphas, p.rows, p.cols, x[None, :])[0]


def packed_matmul(p, x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.rows:
        raise DimensionError("packed_matmul input width", p.rows, x.shape)
    return K.packed_matmul(p.codes, p.alphas, p.rows, p.cols, x)


class FrozenNetwork:
    """Immutable inference-only network of dense and packed ternary layers."""

    def __init__(self, layers):
        # each entry: (kind, payload, activation) with payload a dense matrix or PackedTernaryMatrix
        self.layers = tuple(layers)

    @classmethod
    def from_network(cls, net):
        out = []
        for k, layer in enumerate(net.layers):
            if layer.quantize_eligible:
                if layer.mode != "ternary":
                    raise HLAError(f"layer {k} is quantisation-eligible but not in ternary mode; run quantize first")
                out.append((KIND_TERNARY, pack(layer.quantized(k)), layer.activation))
            else:
                w = layer.weights.copy()
                w.flags.writeable = False
                out.append((KIND_DENSE, w, layer.activation))
        return cls(out)

    def forward(self, x):
        a = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for k, (kind, payload, act) in enumerate(self.layers):
            u, _ = normalize_rows(a, strict=(k == 0))
            z = packed_matmul(payload, u) if kind == KIND_TERNARY else K.matmul(u, payload)
            a = np.maximum(z, 0.0) if act == "relu" else z
        return a

    def predict(self, x):
        return np.argmax(self.forward(x), axis=1)

    def evaluate(self, ds, chunk=1024):
        if len(ds) == 0:
            raise HLAError("cannot evaluate on an empty dataset")
        correct = 0
        for s in range(0, len(ds), chunk):
            correct += int(np.count_nonzero(self.predict(ds.features[s:s + chunk]) == ds.labels[s:s + chunk]))
        return correct / len(ds)

    def to_bytes(self):
        out = bytearray(HTQ_MAGIC + struct.pack("<II", HTQ_VERSION, len(self.layers)))
        for kind, payload, act in self.layers:
            if kind == KIND_TERNARY:
                out += struct.pack("<BII", kind, payload.rows, payload.cols)
                out += payload.alphas.astype("<f8").tobytes()
                out += payload.codes.tobytes()
            else:
                rows, cols = payload.shape
                out += struct.pack("<BII", kind, rows, cols)
                out += payload.astype("<f8").tobytes(order="F")
            out += struct.pack("<B", ACT_TAGS[act])
        out += struct.pack("<I", K.crc32c(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if not data.startswith(HTQ_MAGIC):
            raise WrongMagicError("not an .htq model (bad magic)")
        verify_crc(data, ".htq")
        end = len(data) - 4
        if end < 12:
            raise TruncatedError(".htq header is truncated")
        version, count = struct.unpack_from("<II", data, 4)
        if version != HTQ_VERSION:
            raise VersionError(f".htq version {version} is not supported (expected {HTQ_VERSION})")
        off = 12
        layers = []

        def take(n):
            nonlocal off
            if off + n > end:
                raise TruncatedError(".htq payload is truncated")
            chunk = data[off:off + n]
            off += n
            return chunk

        for _ in range(count):
            kind, rows, cols = struct.unpack("<BII", take(9))
            if kind == KIND_TERNARY:
                alphas = np.frombuffer(take(8 * cols), dtype="<f8").astype(np.float64)
                code_off = off
                codes = np.frombuffer(take(-(-rows * cols // 4)), dtype=np.uint8).copy()
                p = PackedTernaryMatrix(rows, cols, codes, alphas)
                unpack_signs(codes, rows * cols, base_offset=code_off)
                payload = p
            elif kind == KIND_DENSE:
                flat = np.frombuffer(take(8 * rows * cols), dtype="<f8")
                payload = np.ascontiguousarray(flat.reshape(cols, rows).T, dtype=np.float64)
                payload.flags.writeable = False
            else:
                raise FormatError(f"unknown layer kind {kind}")
            (tag,) = struct.unpack("<B", take(1))
            if tag not in ACT_NAMES:
                raise FormatError(f"unknown activation tag {tag}")
            layers.append((kind, payload, ACT_NAMES[tag]))
        if off != end:
            raise FormatError(".htq has trailing bytes before the checksum")
        return cls(layers)

    def size_report(self):
        dense = sum(
            8 * (p.rows * p.cols if kind == KIND_TERNARY else p.size) for kind, p, _ in self.layers
        )
        codes = sum(p.code_bytes for kind, p, _ in self.layers if kind == KIND_TERNARY)
        scales = sum(8 * p.cols for kind, p, _ in self.layers if kind == KIND_TERNARY)
        exceptions = sum(8 * p.size for kind, p, _ in self.layers if kind == KIND_DENSE)
        total = len(self.to_bytes())
        return {
            "dense_bytes": dense,
            "packed_file_bytes": total,
            "code_bytes": codes,
            "scale_bytes": scales,
            "dense_exception_bytes": exceptions,
            "header_bytes": total - codes - scales - exceptions,
        }


def export_model(net, path):
    frozen = FrozenNetwork.from_network(net)
    atomic_write(path, frozen.to_bytes())
    return frozen


def import_model(path):
    return FrozenNetwork.from_bytes(Path(path).read_bytes())
