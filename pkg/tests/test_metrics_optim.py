import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from landseg.metrics import (ConfusionMatrix, bce_loss, class_assign, confusion, dice_coefficient,
                             macro_dice, one_hot, pixel_accuracy)
from landseg.optim import AdamState, NonFiniteGradient, adam_step


def brute_dice(pred, true, c):
    tp = fp = fn = 0
    for p, t in zip(pred.ravel().tolist(), true.ravel().tolist()):
        tp += p == c and t == c
        fp += p == c and t != c
        fn += p != c and t == c
    return 1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def brute_accuracy(pred, true):
    hits = sum(p == t for p, t in zip(pred.ravel().tolist(), true.ravel().tolist()))
    return hits / pred.size


# -- Dice and accuracy -------------------------------------------------------


def test_dice_identical_masks_is_one():
    m = np.array([[0, 1], [2, 3]])
    for c in range(4):
        assert dice_coefficient(m, m, c) == 1.0


def test_dice_disjoint_is_zero():
    assert dice_coefficient(np.zeros((4, 4), int), np.ones((4, 4), int), 1) == 0.0
    assert dice_coefficient(np.zeros((4, 4), int), np.ones((4, 4), int), 0) == 0.0


def test_dice_absent_class_is_one():
    assert dice_coefficient(np.zeros((3, 3), int), np.zeros((3, 3), int), 2) == 1.0


def test_dice_half_overlap():
    pred = np.array([[1, 1, 0, 0]])
    true = np.array([[1, 0, 1, 0]])
    assert dice_coefficient(pred, true, 1) == 0.5


def test_pixel_accuracy_example():
    assert pixel_accuracy(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [0, 1]])) == 0.75


def test_confusion_counts_sum_to_pixels():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 4, (7, 5)), rng.integers(0, 4, (7, 5))
    for c in range(4):
        assert confusion(p, t, c).total == 35


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shapes differ"):
        dice_coefficient(np.zeros((2, 2)), np.zeros((2, 3)), 0)
    with pytest.raises(ValueError, match="shapes differ"):
        pixel_accuracy(np.zeros((2, 2)), np.zeros(4))


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        p, t = rng.integers(0, 4, (16, 16)), rng.integers(0, 4, (16, 16))
        assert pixel_accuracy(p, t) == brute_accuracy(p, t)
        for c in range(4):
            assert dice_coefficient(p, t, c) == brute_dice(p, t, c)


def test_confusion_matrix_pools_counts():
    rng = np.random.default_rng(1)
    preds, trues = rng.integers(0, 4, (5, 8, 8)), rng.integers(0, 4, (5, 8, 8))
    cm = ConfusionMatrix(4)
    for p, t in zip(preds, trues):
        cm.update(p, t)
    assert cm.accuracy() == pixel_accuracy(preds, trues)
    assert cm.per_class_dice() == [dice_coefficient(preds, trues, c) for c in range(4)]
    assert cm.macro_dice() == macro_dice(preds, trues, 4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int8, (6, 6), elements=st.integers(0, 3)), arrays(np.int8, (6, 6), elements=st.integers(0, 3)))
def test_dice_symmetric_and_bounded(a, b):
    for c in range(4):
        d = dice_coefficient(a, b, c)
        assert 0.0 <= d <= 1.0
        assert d == dice_coefficient(b, a, c)
    assert 0.0 <= pixel_accuracy(a, b) <= 1.0


# -- class assignment and one-hot -------------------------------------------


def test_class_assign_ties_pick_lowest():
    probs = np.full((1, 4, 2, 2), 0.5)
    probs[0, 3, 0, 0] = 0.9
    np.testing.assert_array_equal(class_assign(probs)[0], [[3, 0], [0, 0]])


def test_one_hot_roundtrip():
    m = np.random.default_rng(0).integers(0, 4, (3, 5, 5))
    oh = one_hot(m, 4)
    assert oh.shape == (3, 4, 5, 5)
    np.testing.assert_array_equal(oh.sum(axis=1), 1)
    np.testing.assert_array_equal(class_assign(oh), m)


# -- BCE ---------------------------------------------------------------------


def test_bce_at_half_is_ln2():
    loss, _ = bce_loss(np.full((1, 1, 2, 2), 0.5), np.ones((1, 1, 2, 2)))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_bce_confident_wrong_is_clamped():
    loss, grad = bce_loss(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)))
    assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert loss == pytest.approx(16.118, abs=1e-3)
    assert np.isfinite(grad).all() and grad.item() < 0


def test_bce_perfect_prediction_near_zero():
    t = np.array([[[[0.0, 1.0]]]])
    loss, _ = bce_loss(t.copy(), t)
    assert 0 <= loss < 1e-6


def test_bce_rejects_non_binary_targets():
    with pytest.raises(ValueError, match="0.5"):
        bce_loss(np.full((1, 1, 1, 2), 0.3), np.array([[[[0.0, 0.5]]]]))


def test_bce_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, (2, 3, 4, 4))
    t = (rng.uniform(size=p.shape) > 0.5).astype(np.float64)
    _, g = bce_loss(p, t)
    h = 1e-7
    num = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        pp, pm = p.copy(), p.copy()
        pp[idx] += h
        pm[idx] -= h
        num[idx] = (bce_loss(pp, t)[0] - bce_loss(pm, t)[0]) / (2 * h)
    rel = np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-6)
    assert rel.max() < 1e-6


def test_bce_grad_keeps_dtype():
    _, g = bce_loss(np.full((1, 1, 2, 2), 0.3, np.float32), np.ones((1, 1, 2, 2), np.float32))
    assert g.dtype == np.float32


# -- Adam --------------------------------------------------------------------


def scalar_adam(theta, grad_fn, steps, alpha=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - alpha * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(theta)
    return out


def test_adam_first_step_moves_by_alpha():
    params = {"w": np.array([1.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.array([2.0])}, state)
    assert params["w"][0] == pytest.approx(1.0 - 1e-3, abs=1e-10)
    assert state.t == 1


def test_adam_zero_gradient_no_move():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_matches_scalar_reference_on_quadratic():
    params = {"theta": np.array([1.0])}
    state = AdamState.for_params(params, alpha=0.1)
    ref = scalar_adam(1.0, lambda x: 2 * x, 100, alpha=0.1)
    for t in range(100):
        adam_step(params, {"theta": 2 * params["theta"]}, state)
        assert abs(params["theta"][0] - ref[t]) <= 1e-12


def test_adam_rejects_nan_without_mutation():
    params = {"a": np.ones(2), "b": np.ones(2)}
    state = AdamState.for_params(params)
    with pytest.raises(NonFiniteGradient, match="b"):
        adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)
    np.testing.assert_array_equal(params["a"], 1.0)
    assert state.t == 0
    assert not state.m["a"].any()


def test_adam_rejects_key_mismatch():
    params = {"a": np.ones(2)}
    state = AdamState.for_params(params)
    with pytest.raises(KeyError, match="b"):
        adam_step(params, {"b": np.ones(2)}, state)
