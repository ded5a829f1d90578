"""Ternary projection onto unit-norm columns, STE gradient scaling, threshold learning."""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import AllZeroColumnError, DimensionError, DomainError, HLAError
from .numerics import as_matrix

DELTA_MODES = ("sgd_literal", "monotone_abs")


@dataclass
class TernaryColumnSet:
    """Per-column sign pattern in {-1, 0, +1} with scale ``alpha_j = 1/sqrt(nnz_j)``."""

    signs: np.ndarray  # int8, (rows, cols)
    alphas: np.ndarray  # float64, (cols,)

    @property
    def rows(self):
        return self.signs.shape[0]

    @property
    def cols(self):
        return self.signs.shape[1]

    def nnz(self):
        return np.count_nonzero(self.signs, axis=0)

    def sparsity(self):
        return 1.0 - np.count_nonzero(self.signs) / self.signs.size

    def dense(self):
        """The reconstructed matrix ``alpha_j * signs[:, j]``."""
        return self.signs.astype(np.float64) * self.alphas

    def check_valid(self, layer=None):
        empty = np.flatnonzero(self.nnz() == 0)
        if empty.size:
            raise AllZeroColumnError(int(empty[0]), layer)

    @classmethod
    def from_signs(cls, signs):
        signs = np.asarray(signs, dtype=np.int8)
        nnz = np.count_nonzero(signs, axis=0)
        with np.errstate(divide="ignore"):
            alphas = np.where(nnz > 0, 1.0 / np.sqrt(nnz), 0.0)
        return cls(signs, alphas)

    def __eq__(self, other):
        if not isinstance(other, TernaryColumnSet):
            return NotImplemented
        return np.array_equal(self.signs, other.signs) and np.array_equal(self.alphas, other.alphas)


def sorted_magnitudes(w):
    return np.sort(np.abs(np.asarray(w, dtype=np.float64)).ravel())


def threshold_from_sparsity(w, t):
    """Magnitude threshold that zeroes ``floor(t * size)`` entries.

    ``w`` may be a single matrix or a sequence of matrices (pooled, for a
    global threshold across layers).
    """
    if not 0.0 < t < 1.0:
        raise HLAError(f"sparsity target t must lie in (0, 1), got {t}")
    if isinstance(w, (list, tuple)):
        mags = np.sort(np.concatenate([np.abs(np.asarray(x, dtype=np.float64)).ravel() for x in w]))
    else:
        mags = sorted_magnitudes(w)
    idx = int(np.floor(t * mags.size))
    if idx == 0:
        return 0.0
    return float(mags[idx - 1])


def ternary_signs(w, delta):
    w = as_matrix(w)
    return np.where(w > delta, 1, np.where(w < -delta, -1, 0)).astype(np.int8)


def ternary_quantize(w, delta, layer=None):
    if delta < 0:
        raise DomainError(f"threshold must be non-negative, got {delta}")
    tc = TernaryColumnSet.from_signs(ternary_signs(w, delta))
    tc.check_valid(layer)
    return tc


def rescale_factor(w):
    """Gradient re-scaling ``1 - w*w``; vanishes at +/-1, equals 1 at 0."""
    w = as_matrix(w)
    if np.any(np.abs(w) > 1.0 + 1e-9):
        i, j = np.argwhere(np.abs(w) > 1.0 + 1e-9)[0]
        raise DomainError(f"|w[{i},{j}]| = {abs(w[i, j])!r} exceeds 1; column norm invariant broken")
    return np.clip(1.0 - w * w, 0.0, 1.0)


def ste_backward(grad_wrt_quantized, w):
    g = as_matrix(grad_wrt_quantized)
    w = as_matrix(w)
    if g.shape != w.shape:
        raise DimensionError("ste_backward shapes", w.shape, g.shape)
    return g * rescale_factor(w)


def delta_gradient(grad_w, w):
    """Mean of ``grad_w`` over positions where the full-precision weight is nonzero."""
    grad_w = np.asarray(grad_w, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if grad_w.shape != w.shape:
        raise DimensionError("delta_gradient shapes", w.shape, grad_w.shape)
    mask = w != 0.0
    count = int(np.count_nonzero(mask))
    if count == 0:
        return 0.0
    return math.fsum(grad_w[mask]) / count


def update_delta(delta_bar, g, lr_delta, mode="sgd_literal"):
    if mode == "sgd_literal":
        return max(0.0, delta_bar - lr_delta * g)
    if mode == "monotone_abs":
        return delta_bar + lr_delta * abs(g)
    raise HLAError(f"unknown delta update mode {mode!r}; expected one of {DELTA_MODES}")


def column_cosines(w, tc):
    """Per-column ``w_j . what_j`` (cosines, given unit columns)."""
    tc.check_valid()
    return K.col_dot(as_matrix(w), tc.dense())


def mean_cosine_similarity(w, tc):
    return float(np.mean(column_cosines(w, tc)))
