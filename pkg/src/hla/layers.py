"""Hyperspherical fully-connected layers and the network container.

Every layer sees L2-normalised inputs and keeps unit-norm weight columns, so
its pre-activations are cosines.  Batches are row-major: ``X`` has shape
``(batch, features)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import DegenerateInputError, DivergenceError, DimensionError, HLAError, MissingCacheError, NotNormalizedError
from .numerics import EPS_NORM, as_matrix, column_norms, random_unit_columns, renormalize_columns
from .quantizer import rescale_factor, ternary_quantize

ACTIVATIONS = ("relu", "identity")
MODES = ("full_precision", "ternary")


def normalize_input(x):
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.sqrt(K.row_sumsq(x.reshape(1, -1))[0]))
    if not norm > EPS_NORM:
        raise DegenerateInputError(f"input norm {norm!r} is too small to normalise")
    return x / norm


def normalize_rows(a, strict=False):
    """Row-wise L2 normalisation. Returns ``(u, norms)``.

    Rows with norm <= EPS_NORM are left as zeros (a dead hidden layer), or
    raise when ``strict``.
    """
    norms = np.sqrt(K.row_sumsq(a))
    ok = norms > EPS_NORM
    if not ok.all():
        if strict:
            bad = int(np.flatnonzero(~ok)[0])
            raise DegenerateInputError(f"sample {bad} has input norm {norms[bad]!r}")
        u = np.zeros_like(a)
        u[ok] = a[ok] / norms[ok, None]
        return u, norms
    return a / norms[:, None], norms


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else z


def _act_grad(name, z):
    return (z > 0.0).astype(np.float64) if name == "relu" else np.ones_like(z)


@dataclass(eq=False)
class HyperLayer:
    """``y = act(W^T x)`` with unit-norm columns and no bias.

    In ``ternary`` mode the forward pass uses ``Ternary(W, delta_bar)``,
    recomputed from the current ``W`` on every call.  ``delta`` holds the
    fixed fine-tuning threshold while a sparsity stage is active.
    """

    weights: np.ndarray
    activation: str = "relu"
    quantize_eligible: bool = True
    mode: str = "full_precision"
    delta_bar: float = 0.0
    delta: float = 0.0
    velocity: np.ndarray = None
    _cache: tuple = field(default=None, repr=False)
    grad_quantized: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = as_matrix(self.weights)
        if self.activation not in ACTIVATIONS:
            raise HLAError(f"unknown activation {self.activation!r}")
        if self.mode not in MODES:
            raise HLAError(f"unknown mode {self.mode!r}")
        if self.delta_bar < 0:
            raise HLAError("delta_bar must be non-negative")
        if self.velocity is None:
            self.velocity = np.zeros_like(self.weights)

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]

    def quantized(self, index=None):
        return ternary_quantize(self.weights, self.delta_bar, layer=index)

    def forward(self, x, check=True, index=None):
        single = np.ndim(x) == 1
        u = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if u.shape[1] != self.in_dim:
            raise DimensionError("layer input length", self.in_dim, u.shape[1])
        if check:
            norms = np.sqrt(K.row_sumsq(u))
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise NotNormalizedError(f"layer input must have unit norm, got norms {norms}")
        if self.mode == "ternary":
            tc = self.quantized(index)
            z = K.matmul(u, tc.signs.astype(np.float64)) * tc.alphas
            w_eff = tc.dense()
        else:
            z = K.matmul(u, self.weights)
            w_eff = self.weights
        self._cache = (u, z, w_eff)
        y = _act(self.activation, z)
        return y[0] if single else y

    def backward(self, grad_out, rescale=True):
        """Returns ``(grad_in, grad_W)`` for the batch seen by the last forward."""
        if self._cache is None:
            raise MissingCacheError("backward called before forward")
        u, z, w_eff = self._cache
        single = np.ndim(grad_out) == 1
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        if g.shape != z.shape:
            raise DimensionError("grad_out shape", z.shape, g.shape)
        dz = g * _act_grad(self.activation, z)
        grad_eff = K.matmul_tn(u, dz)
        grad_in = K.matmul_nt(dz, w_eff)
        if self.mode == "ternary":
            self.grad_quantized = grad_eff
            grad_w = grad_eff * rescale_factor(self.weights) if rescale else grad_eff
        else:
            self.grad_quantized = None
            grad_w = grad_eff
        return (grad_in[0] if single else grad_in), grad_w

    def sgd_step(self, grad_w, lr, momentum=0.9, weight_decay=1e-4):
        """Projected SGD: momentum step on ``W`` then column renormalisation."""
        step = grad_w + weight_decay * self.weights if weight_decay else np.array(grad_w, dtype=np.float64)
        if momentum:
            self.velocity = momentum * self.velocity + step
            step = self.velocity
        updated = self.weights - lr * step
        if not np.all(np.isfinite(updated)):
            raise DivergenceError("non-finite weights after SGD step")
        self.weights = renormalize_columns(updated)
        return self


def layer_forward(layer, x):
    return layer.forward(x, check=True)


def layer_backward(layer, grad_out, rescale=True):
    return layer.backward(grad_out, rescale=rescale)


def apply_sgd_step(layer, grad_w, lr, momentum=0.9, weight_decay=1e-4):
    return layer.sgd_step(grad_w, lr, momentum=momentum, weight_decay=weight_decay)


def default_eligibility(num_layers):
    """First and last layers stay full precision."""
    return [0 < k < num_layers - 1 for k in range(num_layers)]


class Network:
    """Ordered stack of hyperspherical layers; the last one emits logits."""

    def __init__(self, layers):
        if not layers:
            raise HLAError("a network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise DimensionError(f"layer {k + 1} input dim", layers[k].out_dim, layers[k + 1].in_dim)
        self.layers = list(layers)
        self._norms = None

    @classmethod
    def random(cls, dims, rng, eligibility=None):
        n = len(dims) - 1
        if eligibility is None:
            eligibility = default_eligibility(n)
        layers = [
            HyperLayer(
                random_unit_columns(rng, dims[k], dims[k + 1]),
                activation="identity" if k == n - 1 else "relu",
                quantize_eligible=bool(eligibility[k]),
            )
            for k in range(n)
        ]
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def dims(self):
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def eligible(self):
        return [k for k, layer in enumerate(self.layers) if layer.quantize_eligible]

    def set_mode(self, mode):
        for layer in self.layers:
            layer.mode = mode if layer.quantize_eligible else "full_precision"

    def forward(self, x):
        a = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if a.shape[1] != self.input_dim:
            raise DimensionError("network input length", self.input_dim, a.shape[1])
        norms = []
        for k, layer in enumerate(self.layers):
            u, r = normalize_rows(a, strict=(k == 0))
            norms.append(r)
            a = layer.forward(u, check=False, index=k)
        self._norms = norms
        return a

    def backward(self, grad_logits, rescale=True):
        """Backpropagate; returns the list of per-layer weight gradients."""
        if self._norms is None:
            raise MissingCacheError("backward called before forward")
        grads = [None] * len(self.layers)
        g = np.atleast_2d(grad_logits)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            g_u, grads[k] = layer.backward(g, rescale=rescale)
            if k == 0:
                break
            u = layer._cache[0]
            r = self._norms[k]
            radial = K.col_dot(np.ascontiguousarray(u.T), np.ascontiguousarray(g_u.T))
            live = r > EPS_NORM
            g = np.zeros_like(g_u)
            g[live] = (g_u[live] - u[live] * radial[live, None]) / r[live, None]
        return grads

    def predict(self, x):
        """Class indices; ties go to the lowest index."""
        return np.argmax(self.forward(x), axis=1)

    def column_norm_error(self):
        return max(float(np.max(np.abs(column_norms(layer.weights) - 1.0))) for layer in self.layers)
