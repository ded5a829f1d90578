"""Deterministic dense numerics: matrix helpers, RNG, LR schedule, loss, FD oracle.

A "matrix" throughout the package is a 2-D float64 ``numpy.ndarray`` of shape
``(m, n)`` whose columns ``W[:, j]`` are the weight vectors.  Serialised
payloads use column-major (Fortran) order.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import DegenerateColumnError, DimensionError, HLAError

EPS_NORM = 1e-12


def as_matrix(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError("matrix rank", 2, w.ndim)
    return np.ascontiguousarray(w)


def matvec(w, x):
    """``W^T x`` with the sum over rows taken in ascending order."""
    w = as_matrix(w)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (w.shape[0],):
        raise DimensionError("matvec input length", w.shape[0], x.shape[0] if x.ndim == 1 else x.shape)
    return K.matmul(x[None, :], w)[0]


def column_norms(w):
    return np.sqrt(K.col_sumsq(as_matrix(w)))


def renormalize_columns(w):
    """Scale every column to unit L2 norm; degenerate columns raise."""
    w = as_matrix(w)
    norms = column_norms(w)
    bad = np.flatnonzero(~(norms > EPS_NORM))
    if bad.size:
        raise DegenerateColumnError(int(bad[0]), float(norms[bad[0]]))
    return w / norms


def make_rng(seed):
    """Seeded generator: numpy ``PCG64`` (O'Neill's PCG-XSL-RR 128/64).

    PCG64's raw stream and numpy's float/normal transforms are defined in
    portable integer arithmetic, so a seed yields the same draws on every
    platform for a given numpy major version.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_state(rng):
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": {"state": str(st["state"]["state"]), "inc": str(st["state"]["inc"])},
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def rng_from_state(state):
    rng = np.random.Generator(np.random.PCG64(0))
    rng.bit_generator.state = {
        "bit_generator": state["bit_generator"],
        "state": {"state": int(state["state"]["state"]), "inc": int(state["state"]["inc"])},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return rng


def random_unit_columns(rng, m, n):
    """Columns drawn uniformly from the unit sphere (normalised Gaussians)."""
    return renormalize_columns(rng.standard_normal((m, n)))


@dataclass
class LrSchedule:
    """Cosine annealing with warm restarts, indexed by epoch."""

    eta_max: float = 0.01
    eta_min: float = 0.0
    period: int = 10
    restart_mult: float = 1.0

    def __post_init__(self):
        if not self.eta_max > 0 or self.eta_min < 0 or self.eta_min > self.eta_max:
            raise HLAError(f"invalid lr bounds eta_min={self.eta_min}, eta_max={self.eta_max}")
        if self.period < 1 or not self.restart_mult > 0:
            raise HLAError("lr period must be >= 1 and restart_mult > 0")


def annealed_lr(schedule, t_cur, t_i):
    """Learning rate after ``t_cur`` epochs of a period of length ``t_i``."""
    lo, hi = schedule.eta_min, schedule.eta_max
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * t_cur / t_i))


def lr_at(schedule, epoch):
    """Cosine annealing with restarts; every period lasts at least one epoch."""
    t_i = float(schedule.period)
    t_cur = float(epoch)
    while t_cur >= t_i:
        t_cur -= t_i
        t_i = max(1.0, t_i * schedule.restart_mult)
    return annealed_lr(schedule, t_cur, t_i)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target):
    """Returns ``(loss, grad)`` of ``-log softmax(logits)[target]``."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not 0 <= target < k:
        raise DimensionError("target class", f"[0, {k})", target)
    z = logits - logits.max()
    lse = math.log(np.exp(z).sum())
    loss = lse - z[target]
    grad = np.exp(z - lse)
    grad[target] -= 1.0
    return float(loss), grad


def batch_cross_entropy(logits, targets):
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = lse - z[rows, targets]
    grad = np.exp(z - lse[:, None])
    grad[rows, targets] -= 1.0
    b = logits.shape[0]
    return float(math.fsum(losses)) / b, grad / b, losses


def finite_diff_grad(f, w, h=1e-5):
    """Central-difference gradient of scalar ``f`` at matrix ``w``."""
    w = as_matrix(w).copy()
    g = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        orig = w[idx]
        w[idx] = orig + h
        fp = f(w)
        w[idx] = orig - h
        fm = f(w)
        w[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g
