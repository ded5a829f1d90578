import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from hla.errors import DegenerateColumnError, DimensionError
from hla.numerics import (
    LrSchedule, batch_cross_entropy, finite_diff_grad, lr_at, make_rng, matvec, random_unit_columns,
    renormalize_columns, rng_from_state, rng_state, softmax_cross_entropy,
)

from conftest import unit_columns


# --- matvec ---------------------------------------------------------------

def test_matvec_identity():
    assert np.array_equal(matvec(np.eye(2), [0.6, 0.8]), [0.6, 0.8])


def test_matvec_selector_columns():
    w = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(matvec(w, [1.0, 2.0, 3.0]), [1.0, 2.0])


def test_matvec_hand_dot():
    # 0.5*0.2 - 0.5*0.4
    assert matvec(np.array([[0.5], [-0.5]]), [0.2, 0.4])[0] == pytest.approx(-0.1, abs=1e-15)


def test_matvec_length_mismatch_names_both_lengths():
    with pytest.raises(DimensionError) as info:
        matvec(np.eye(3), [1.0, 2.0])
    assert "3" in str(info.value) and "2" in str(info.value)


def test_matvec_ascending_order_matches_python_loop(rng):
    w = rng.standard_normal((37, 5))
    x = rng.standard_normal(37)
    ref = []
    for j in range(5):
        acc = 0.0
        for i in range(37):
            acc += w[i, j] * x[i]
        ref.append(acc)
    assert np.array_equal(matvec(w, x), ref)


# --- renormalize_columns --------------------------------------------------

def test_renormalize_345():
    out = renormalize_columns(np.array([[3.0], [4.0]]))
    assert np.allclose(out[:, 0], [0.6, 0.8], atol=1e-15)


def test_renormalize_unit_column_unchanged():
    assert np.array_equal(renormalize_columns(np.array([[1.0], [0.0], [0.0]])), [[1.0], [0.0], [0.0]])


def test_renormalize_zero_column_names_index():
    with pytest.raises(DegenerateColumnError) as info:
        renormalize_columns(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert info.value.column == 1


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                  elements=st.floats(-10, 10, allow_nan=False)))
def test_renormalize_idempotent(w):
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms < 1e-6):
        return
    once = renormalize_columns(w)
    assert np.allclose(np.linalg.norm(once, axis=0), 1.0, atol=1e-12)
    assert np.max(np.abs(renormalize_columns(once) - once)) <= 1e-15


# --- rng ------------------------------------------------------------------

def test_rng_same_seed_same_stream():
    a, b = make_rng(7), make_rng(7)
    assert np.array_equal(a.standard_normal(100), b.standard_normal(100))


def test_rng_state_round_trip_is_json_safe():
    import json
    r = make_rng(3)
    r.standard_normal(17)
    restored = rng_from_state(json.loads(json.dumps(rng_state(r))))
    assert np.array_equal(r.random(50), restored.random(50))


def test_random_unit_columns_are_unit():
    w = random_unit_columns(make_rng(0), 9, 4)
    assert np.allclose(np.linalg.norm(w, axis=0), 1.0, atol=1e-15)


# --- lr_at ----------------------------------------------------------------

def test_lr_start_of_period_is_max():
    assert lr_at(LrSchedule(0.01, 0.0, 10), 0) == 0.01


def test_lr_end_of_period_is_min():
    # evaluated just before the restart, T_cur = T_i
    from hla.numerics import annealed_lr
    assert annealed_lr(LrSchedule(0.01, 0.0, 10), 10, 10) == pytest.approx(0.0, abs=1e-18)


def test_lr_midpoint():
    assert lr_at(LrSchedule(0.01, 0.0, 10), 5) == pytest.approx(0.005, abs=1e-15)


def test_lr_restarts_with_multiplier():
    s = LrSchedule(1.0, 0.0, 4, 2.0)
    # periods: [0,4), [4,12), [12,28)
    assert lr_at(s, 4) == 1.0 and lr_at(s, 12) == 1.0
    assert lr_at(s, 8) == pytest.approx(0.5)


@given(st.floats(1e-4, 1.0), st.floats(0.0, 1.0), st.integers(1, 20), st.floats(0.5, 3.0), st.integers(0, 500))
def test_lr_bounded(eta_max, frac, period, mult, epoch):
    s = LrSchedule(eta_max, eta_max * frac, period, mult)
    v = lr_at(s, epoch)
    assert s.eta_min - 1e-15 <= v <= s.eta_max + 1e-15


# --- cross entropy --------------------------------------------------------

def test_ce_symmetric_logits():
    loss, grad = softmax_cross_entropy([0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert np.allclose(grad, [-0.5, 0.5], atol=1e-15)


def test_ce_large_logit_no_overflow():
    loss, grad = softmax_cross_entropy([1000.0, 0.0], 0)
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(grad))


def test_ce_three_classes():
    # oracle: log(e^1 + e^2 + e^3) - 3 evaluated with math.exp
    loss, _ = softmax_cross_entropy([1.0, 2.0, 3.0], 2)
    assert loss == pytest.approx(0.40760596444438013, abs=1e-12)
    assert round(loss, 6) == 0.407606


def test_ce_bad_target():
    with pytest.raises(DimensionError):
        softmax_cross_entropy([0.0, 1.0], 2)


@given(hnp.arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)), st.data())
def test_ce_grad_sums_to_zero(logits, data):
    target = data.draw(st.integers(0, logits.size - 1))
    _, grad = softmax_cross_entropy(logits, target)
    assert abs(grad.sum()) <= 1e-12


def test_batch_ce_matches_rowwise(rng):
    logits = rng.standard_normal((6, 4))
    y = rng.integers(0, 4, 6)
    loss, grad, losses = batch_cross_entropy(logits, y)
    rows = [softmax_cross_entropy(logits[i], y[i]) for i in range(6)]
    assert np.allclose(losses, [r[0] for r in rows], atol=1e-14)
    assert loss == pytest.approx(np.mean([r[0] for r in rows]), abs=1e-14)
    assert np.allclose(grad, np.array([r[1] for r in rows]) / 6, atol=1e-15)


# --- finite differences ---------------------------------------------------

def test_fd_linear(rng):
    w = rng.standard_normal((3, 4))
    assert np.max(np.abs(finite_diff_grad(lambda a: a.sum(), w) - 1.0)) < 1e-9


def test_fd_quadratic(rng):
    w = rng.standard_normal((3, 4))
    assert np.max(np.abs(finite_diff_grad(lambda a: 0.5 * np.sum(a * a), w) - w)) < 1e-7


def test_fd_leaves_input_untouched(rng):
    w = unit_columns(rng, 4, 4)
    before = w.copy()
    finite_diff_grad(lambda a: float(np.sum(a ** 3)), w)
    assert np.array_equal(w, before)
