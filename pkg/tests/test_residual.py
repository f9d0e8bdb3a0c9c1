import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stpsim.errors import DimensionMismatch
from stpsim.residual import (finite_difference_grad, fused_backward, fused_forward, random_op, relative_error,
                             unfused_forward, verify_residual)


def setup(t=2, kind="attn", seed=0, shape=(3, 4)):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape), random_op(shape[1], t, rng, kind), rng.normal(size=shape)


def test_zero_weights_identity():
    x, op, g = setup()
    z = op.zeroed()
    # tanh(0) = 0, so every rank contributes nothing but its share of the residual
    assert np.allclose(fused_forward(x, z), x, atol=1e-15)


def test_zero_weights_gradient_is_upstream():
    x, op, g = setup()
    assert np.array_equal(fused_backward(x, op.zeroed(), g), g)


@pytest.mark.parametrize("t", [1, 2, 4, 8])
@pytest.mark.parametrize("kind", ["attn", "mlp"])
def test_fused_equals_unfused(t, kind):
    x, op, _ = setup(t, kind)
    assert np.abs(fused_forward(x, op) - unfused_forward(x, op)).max() <= 1e-12


def test_forward_against_independent_reference():
    x, op, _ = setup(2, "attn", seed=3)
    mu = x.mean(axis=1, keepdims=True)
    sd = np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + 1e-5)
    y = (x - mu) / sd * op.gain + op.bias
    ref = x + sum(np.tanh(y @ op.w1[r] + op.b[r]) for r in range(2))
    assert np.allclose(fused_forward(x, op), ref, rtol=0, atol=1e-13)


@pytest.mark.parametrize("t", [1, 2, 4, 8])
@pytest.mark.parametrize("kind", ["attn", "mlp"])
def test_gradient_matches_finite_differences(t, kind):
    x, op, g = setup(t, kind, seed=t)
    fd = finite_difference_grad(lambda z: float(np.sum(fused_forward(z, op) * g)), x, 1e-5)
    assert relative_error(fused_backward(x, op, g), fd) < 1e-6


def test_dropping_identity_path_fails_check():
    x, op, g = setup(4)
    fd = finite_difference_grad(lambda z: float(np.sum(fused_forward(z, op) * g)), x, 1e-5)
    assert relative_error(fused_backward(x, op, g, residual=False), fd) > 1e-6


def test_identity_path_independent_of_t():
    x, op1, g = setup(1, seed=5)
    for t in (2, 4, 8):
        _, op, _ = setup(t, seed=5)
        diff = fused_backward(x, op, g) - fused_backward(x, op, g, residual=False)
        assert np.allclose(diff, g, rtol=0, atol=1e-13)


def test_fd_of_sum_of_squares():
    x = np.arange(12.0).reshape(3, 4)
    assert np.allclose(finite_difference_grad(lambda z: float(np.sum(z * z)), x), 2 * x, atol=1e-6)


def test_fd_exact_for_linear():
    x = np.random.default_rng(0).normal(size=(3, 4))
    a = np.random.default_rng(1).normal(size=(3, 4))
    for eps in (1e-3, 1e-1, 1.0):
        assert np.allclose(finite_difference_grad(lambda z: float(np.sum(a * z)), x, eps), a, atol=1e-12)


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_difference_grad(lambda z: 0.0, np.zeros((1, 1)), 0)


def test_cross_check_with_ones_upstream():
    x, op, _ = setup(2, seed=9)
    fd = finite_difference_grad(lambda z: float(np.sum(fused_forward(z, op))), x, 1e-5)
    assert relative_error(fused_backward(x, op, np.ones_like(x)), fd) < 1e-6


def test_dimension_mismatch():
    x, op, g = setup()
    with pytest.raises(DimensionMismatch):
        fused_forward(np.zeros((3, 5)), op)
    with pytest.raises(DimensionMismatch):
        fused_backward(x, op, np.zeros((2, 4)))


def test_verify_residual_report():
    r = verify_residual(trials=16, seed=1)
    assert r.passed
    assert verify_residual(trials=16, seed=1) == r
    with pytest.raises(ValueError):
        verify_residual(trials=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8]), st.sampled_from(["attn", "mlp"]))
def test_gradient_property(seed, t, kind):
    x, op, g = setup(t, kind, seed=seed)
    fd = finite_difference_grad(lambda z: float(np.sum(fused_forward(z, op) * g)), x, 1e-5)
    assert relative_error(fused_backward(x, op, g), fd) < 1e-6
