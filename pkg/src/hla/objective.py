"""Cosine-distance regulariser and the two training objectives built on it."""

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import batch_cross_entropy
from .quantizer import column_cosines, delta_gradient, threshold_from_sparsity, ternary_quantize


@dataclass
class ObjectiveReport:
    task_loss: float
    reg_loss: float
    total: float
    per_layer_cosine: list = field(default_factory=list)


def ld_loss(w, tc):
    """Mean over columns of ``(w_j . what_j - 1)^2``."""
    c = column_cosines(w, tc)
    return math.fsum((c - 1.0) ** 2) / c.size


def ld_grad(w, tc):
    """Gradient of :func:`ld_loss` with the ternary target held fixed."""
    c = column_cosines(w, tc)
    return tc.dense() * ((2.0 / c.size) * (c - 1.0))


def layer_thresholds(net, t, threshold_scope="per_layer"):
    """Fine-tuning threshold ``T(t)`` for every eligible layer (``None`` elsewhere)."""
    eligible = net.eligible()
    out = [None] * len(net.layers)
    if threshold_scope == "global":
        shared = threshold_from_sparsity([net.layers[k].weights for k in eligible], t)
        for k in eligible:
            out[k] = shared
    else:
        for k in eligible:
            out[k] = threshold_from_sparsity(net.layers[k].weights, t)
    return out


def _regularise(net, thresholds, grads):
    """Adds ``ld_grad`` into ``grads`` in place; returns (reg_loss, per-layer cosines)."""
    reg_terms = []
    cosines = []
    for k, delta in enumerate(thresholds):
        if delta is None:
            continue
        w = net.layers[k].weights
        tc = ternary_quantize(w, delta, layer=k)
        c = column_cosines(w, tc)
        reg_terms.append(math.fsum((c - 1.0) ** 2) / c.size)
        cosines.append(float(np.mean(c)))
        grads[k] = grads[k] + tc.dense() * ((2.0 / c.size) * (c - 1.0))
    return math.fsum(reg_terms), cosines


def objective_phase1(net, x, y, t=None, *, thresholds=None, threshold_scope="per_layer", return_parts=False):
    """Task loss on full-precision weights plus the regulariser at ``Delta = T(t)``.

    Returns ``(report, grads)``, or ``(report, grads, task_grads)`` when
    ``return_parts`` is set.
    """
    if thresholds is None:
        thresholds = layer_thresholds(net, t, threshold_scope)
    net.set_mode("full_precision")
    logits = net.forward(x)
    task_loss, g_logits, _ = batch_cross_entropy(logits, np.asarray(y))
    task_grads = net.backward(g_logits)
    grads = list(task_grads)
    reg_loss, cosines = _regularise(net, thresholds, grads)
    report = ObjectiveReport(task_loss, reg_loss, task_loss + reg_loss, cosines)
    if return_parts:
        return report, grads, task_grads
    return report, grads


def objective_phase2(net, x, y, rescale=True):
    """Ternary forward, scaled-STE task gradient, regulariser at each ``delta_bar``.

    Returns ``(report, grads, delta_grads)``; ``delta_grads[k]`` is ``None``
    for layers that are not quantised.
    """
    logits = net.forward(x)
    task_loss, g_logits, _ = batch_cross_entropy(logits, np.asarray(y))
    grads = net.backward(g_logits, rescale=rescale)
    thresholds = [layer.delta_bar if layer.mode == "ternary" else None for layer in net.layers]
    reg_loss, cosines = _regularise(net, thresholds, grads)
    delta_grads = [
        delta_gradient(grads[k], layer.weights) if layer.mode == "ternary" else None
        for k, layer in enumerate(net.layers)
    ]
    report = ObjectiveReport(task_loss, reg_loss, task_loss + reg_loss, cosines)
    return report, grads, delta_grads
