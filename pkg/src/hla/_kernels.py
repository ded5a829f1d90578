"""Hot inner loops, each in two flavours.

Every kernel has a numba ``@njit`` version and a pure-numpy version. Both
accumulate in the same fixed ascending order, so they agree bit for bit; the
numpy version vectorises over the dimensions that are not being reduced.

Set ``HLA_NUMBA=0`` in the environment before importing to force the numpy
path (numba is also skipped automatically when it is not installed).
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("HLA_NUMBA", "1").lower() not in ("0", "false", "off", "no")

# 2-bit codes: 0b00 -> 0, 0b01 -> +1, 0b10 -> -1, 0b11 reserved.
_CRC32C_POLY = 0x82F63B78


def _crc32c_table():
    table = np.zeros(256, dtype=np.uint32)
    for b in range(256):
        c = b
        for _ in range(8):
            c = (c >> 1) ^ _CRC32C_POLY if c & 1 else c >> 1
        table[b] = c
    return table


CRC32C_TABLE = _crc32c_table()


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def np_matmul(a, b):
    """``a @ b`` for a (B, m), b (m, n), summing over m in ascending order."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[1]):
        out += a[:, i, None] * b[i]
    return out


def np_matmul_tn(a, b):
    """``a.T @ b`` for a (B, m), b (B, n), summing over B in ascending order."""
    out = np.zeros((a.shape[1], b.shape[1]))
    for k in range(a.shape[0]):
        out += a[k, :, None] * b[k]
    return out


def np_matmul_nt(a, b):
    """``a @ b.T`` for a (B, n), b (m, n), summing over n in ascending order."""
    out = np.zeros((a.shape[0], b.shape[0]))
    for j in range(a.shape[1]):
        out += a[:, j, None] * b[:, j]
    return out


def np_col_sumsq(w):
    out = np.zeros(w.shape[1])
    for i in range(w.shape[0]):
        out += w[i] * w[i]
    return out


def np_row_sumsq(x):
    out = np.zeros(x.shape[0])
    for i in range(x.shape[1]):
        out += x[:, i] * x[:, i]
    return out


def np_col_dot(a, b):
    out = np.zeros(a.shape[1])
    for i in range(a.shape[0]):
        out += a[i] * b[i]
    return out


def np_pack_codes(signs):
    signs = np.asarray(signs, dtype=np.int8)
    count = signs.shape[0]
    padded = np.zeros(-(-count // 4) * 4, dtype=np.uint8)
    padded[:count] = np.where(signs > 0, 1, np.where(signs < 0, 2, 0))
    quads = padded.reshape(-1, 4)
    return (quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)).astype(np.uint8)


def np_unpack_codes(codes, count):
    """Returns ``(signs, bad_offset)``; ``bad_offset`` is -1 when all codes are valid."""
    codes = np.asarray(codes, dtype=np.uint8)
    fields = np.stack([(codes >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    bad = np.flatnonzero(fields == 3)
    if bad.size:
        return np.zeros(count, dtype=np.int8), int(bad[0] // 4)
    lut = np.array([0, 1, -1, 0], dtype=np.int8)
    return lut[fields], -1


def np_packed_matmul(codes, alphas, rows, cols, x):
    """Multiply-free ternary product: ``out[b, j] = alpha_j * sum_i (+/-) x[b, i]``."""
    signs, _ = np_unpack_codes(codes, rows * cols)
    signs = signs.reshape(cols, rows)  # column-major storage
    out = np.zeros((x.shape[0], cols))
    for i in range(rows):
        s = signs[:, i]
        plus = s > 0
        minus = s < 0
        xi = x[:, i, None]
        # adding/subtracting only where the code is nonzero
        out[:, plus] = out[:, plus] + xi
        out[:, minus] = out[:, minus] - xi
    return out * alphas


def np_crc32c(data, crc=0):
    crc = (~int(crc)) & 0xFFFFFFFF
    table = CRC32C_TABLE
    for byte in bytes(data):
        crc = int(table[(crc ^ byte) & 0xFF]) ^ (crc >> 8)
    return (~crc) & 0xFFFFFFFF


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def nb_matmul(a, b):
        nb_, m = a.shape
        n = b.shape[1]
        out = np.zeros((nb_, n))
        # j innermost walks rows of b contiguously; each out[k, j] still sums i ascending
        for k in range(nb_):
            for i in range(m):
                aki = a[k, i]
                for j in range(n):
                    out[k, j] += aki * b[i, j]
        return out

    @_jit
    def nb_matmul_tn(a, b):
        nb_, m = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for k in range(nb_):
            for i in range(m):
                aki = a[k, i]
                for j in range(n):
                    out[i, j] += aki * b[k, j]
        return out

    @_jit
    def nb_matmul_nt(a, b):
        nb_, n = a.shape
        m = b.shape[0]
        out = np.zeros((nb_, m))
        for k in range(nb_):
            for i in range(m):
                acc = 0.0
                for j in range(n):
                    acc += a[k, j] * b[i, j]
                out[k, i] = acc
        return out

    @_jit
    def nb_col_sumsq(w):
        m, n = w.shape
        out = np.zeros(n)
        for j in range(n):
            acc = 0.0
            for i in range(m):
                acc += w[i, j] * w[i, j]
            out[j] = acc
        return out

    @_jit
    def nb_row_sumsq(x):
        b, m = x.shape
        out = np.zeros(b)
        for k in range(b):
            acc = 0.0
            for i in range(m):
                acc += x[k, i] * x[k, i]
            out[k] = acc
        return out

    @_jit
    def nb_col_dot(a, b):
        m, n = a.shape
        out = np.zeros(n)
        for j in range(n):
            acc = 0.0
            for i in range(m):
                acc += a[i, j] * b[i, j]
            out[j] = acc
        return out

    @_jit
    def nb_pack_codes(signs):
        count = signs.shape[0]
        out = np.zeros((count + 3) // 4, dtype=np.uint8)
        for k in range(count):
            s = signs[k]
            if s > 0:
                code = 1
            elif s < 0:
                code = 2
            else:
                code = 0
            out[k >> 2] |= np.uint8(code << (2 * (k & 3)))
        return out

    @_jit
    def nb_unpack_codes(codes, count):
        out = np.zeros(count, dtype=np.int8)
        for k in range(count):
            code = (codes[k >> 2] >> (2 * (k & 3))) & 3
            if code == 1:
                out[k] = 1
            elif code == 2:
                out[k] = -1
            elif code == 3:
                return np.zeros(count, dtype=np.int8), k >> 2
        return out, -1

    @_jit
    def nb_packed_matmul(codes, alphas, rows, cols, x):
        nb_ = x.shape[0]
        xt = np.ascontiguousarray(x.T)  # (rows, batch): one sample per lane
        out = np.empty((nb_, cols))
        acc = np.empty(nb_)
        for j in range(cols):
            acc[:] = 0.0
            base = j * rows
            for i in range(rows):
                k = base + i
                code = (codes[k >> 2] >> (2 * (k & 3))) & 3
                # per sample, terms still enter in ascending i
                if code == 1:
                    for b in range(nb_):
                        acc[b] += xt[i, b]
                elif code == 2:
                    for b in range(nb_):
                        acc[b] -= xt[i, b]
            for b in range(nb_):
                out[b, j] = alphas[j] * acc[b]
        return out

    @_jit
    def _nb_crc32c(data, crc, table):
        c = np.uint32(crc) ^ np.uint32(0xFFFFFFFF)
        for k in range(data.shape[0]):
            c = np.uint32(table[np.uint32(c ^ np.uint32(data[k])) & np.uint32(0xFF)] ^ np.uint32(c >> np.uint32(8)))
        return c ^ np.uint32(0xFFFFFFFF)

    def nb_crc32c(data, crc=0):
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        return int(_nb_crc32c(buf, np.uint32(crc), CRC32C_TABLE)) & 0xFFFFFFFF


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

_NAMES = (
    "matmul", "matmul_tn", "matmul_nt", "col_sumsq", "row_sumsq", "col_dot",
    "pack_codes", "unpack_codes", "packed_matmul", "crc32c",
)


def implementations(name):
    """``{"numpy": fn, "numba": fn}`` for kernel ``name`` (numba only if available)."""
    impls = {"numpy": globals()["np_" + name]}
    if HAVE_NUMBA:
        impls["numba"] = globals()["nb_" + name]
    return impls


_prefix = "nb_" if USE_NUMBA else "np_"
for _name in _NAMES:
    globals()[_name] = globals()[_prefix + _name]
del _name, _prefix

BACKEND = "numba" if USE_NUMBA else "numpy"
