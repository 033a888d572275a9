import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lcwof import losses
from lcwof.numcore import ParamTensor, ShapeError

logit_arrays = arrays(np.float64, (4, 3), elements=st.floats(-20, 20))


def test_masked_base_reduces_to_softmax_ce(rng):
    z = rng.normal(size=(6, 4))
    t = rng.integers(0, 4, size=6)
    masked = losses.base_normalized_ce(z, np.full((6, 3), -np.inf), t)
    plain = losses.softmax_ce(z, t)
    assert abs(masked.value - plain.value) < 1e-10
    np.testing.assert_allclose(masked.grads["novel"], plain.grads["logits"], atol=1e-12)
    assert not masked.grads["base"].any()


def test_one_novel_against_64_equal_base_logits():
    out = losses.base_normalized_ce(np.full((1, 1), 2.5), np.full((1, 64), 2.5), [0])
    assert abs(out.value - math.log(65)) < 1e-12


def test_base_logits_raise_the_loss(rng):
    z = rng.normal(size=(5, 3))
    t = rng.integers(0, 3, size=5)
    assert losses.base_normalized_ce(z, rng.normal(size=(5, 7)), t).value > losses.softmax_ce(z, t).value


def test_base_gradient_is_base_softmax_mass(rng):
    zn, zb = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    g = losses.base_normalized_ce(zn, zb, [0, 1, 0]).grads["base"]
    p = losses.softmax(np.hstack([zn, zb]))[:, 2:]
    np.testing.assert_allclose(g, p / 3, rtol=1e-12)


def test_softmax_ce_is_stable_for_large_logits():
    out = losses.softmax_ce(np.array([[1e4, 0.0, -1e4]]), [0])
    assert out.value == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(out.grads["logits"]).all()


def test_target_validation():
    with pytest.raises(ValueError):
        losses.softmax_ce(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeError):
        losses.softmax_ce(np.zeros((2, 3)), [0])
    with pytest.raises(ShapeError):
        losses.base_normalized_ce(np.zeros((2, 3)), np.zeros((3, 3)), [0, 1])


def test_l2_wc_identity_and_value(rng):
    w = rng.normal(size=(3, 4))
    p = ParamTensor(w, name="w")
    assert losses.l2_wc([p], {"w": w.copy()}).value == 0.0
    out = losses.l2_wc({"w": w}, {"w": w - 0.5})
    assert out.value == pytest.approx(0.25 * w.size)
    np.testing.assert_allclose(out.grads["w"], np.full_like(w, 1.0))


def test_l2_wc_rejects_missing_or_mismatched_snapshot():
    with pytest.raises(KeyError):
        losses.l2_wc({"w": np.zeros((1, 1))}, {})
    with pytest.raises(ShapeError):
        losses.l2_wc({"w": np.zeros((1, 2))}, {"w": np.zeros((2, 1))})


def test_phase2_loss_combines_terms(rng):
    zn, zb = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    p = ParamTensor(rng.normal(size=(2, 2)), name="backbone.w1")
    snap = {"backbone.w1": p.value + 1.0}
    out = losses.phase2_loss(zn, zb, [0, 1, 1], [p], snap, 3.0)
    ce = losses.base_normalized_ce(zn, zb, [0, 1, 1]).value
    assert out.value == pytest.approx(ce + 3.0 * 4.0)
    np.testing.assert_allclose(out.grads["backbone.w1"], np.full((2, 2), -6.0))
    with pytest.raises(ValueError):
        losses.phase2_loss(zn, zb, [0, 1, 1], [p], snap, -1.0)


def test_kd_kl_identity_and_sign(rng):
    o = rng.normal(size=(4, 6))
    assert losses.kd_kl(o, o, 2.0).value < 1e-12
    assert losses.kd_kl(o, rng.normal(size=(4, 6)), 2.0).value > 0
    with pytest.raises(ValueError):
        losses.kd_kl(o, o, 0.0)


def test_kd_kl_has_no_temperature_squared_factor():
    cur, old = np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])
    p = losses.softmax(old / 2.0)[0]
    expected = float((p * np.log(p / 0.5)).sum())
    assert losses.kd_kl(cur, old, 2.0).value == pytest.approx(expected, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(logit_arrays, st.floats(-10, 10))
def test_softmax_ce_shift_invariant(z, c):
    t = [0, 1, 2, 0]
    assert losses.softmax_ce(z + c, t).value == pytest.approx(losses.softmax_ce(z, t).value, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(logit_arrays)
def test_softmax_ce_gradient_rows_sum_to_zero(z):
    g = losses.softmax_ce(z, [2, 1, 0, 0]).grads["logits"]
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(logit_arrays, arrays(np.float64, (4, 5), elements=st.floats(-20, 20)))
def test_base_normalized_ce_bounds_plain_ce(zn, zb):
    t = [0, 1, 2, 1]
    assert losses.base_normalized_ce(zn, zb, t).value >= losses.softmax_ce(zn, t).value - 1e-12


@settings(max_examples=40, deadline=None)
@given(logit_arrays, logit_arrays)
def test_kd_kl_non_negative(a, b):
    assert losses.kd_kl(a, b, 2.0).value >= 0.0
