import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnlab.loss_grad import (analytic_gradients, empirical_loss, finite_difference_gradients, logistic_loss,
                               loss_and_gradients, loss_derivative, max_relative_error, softmax_jacobian)
from attnlab.numerics import stable_softmax
from conftest import tiny_instance


@pytest.mark.parametrize("z", [-50.0, -3.0, -1e-3, 0.0, 1e-3, 2.0, 40.0])
def test_logistic_loss_matches_direct_formula(z):
    assert logistic_loss(z) == pytest.approx(math.log1p(math.exp(-z)), rel=1e-14)
    assert loss_derivative(z) == pytest.approx(-1.0 / (1.0 + math.exp(z)), rel=1e-14)


def test_loss_tails_do_not_overflow():
    assert logistic_loss(-1000.0) == pytest.approx(1000.0)
    assert logistic_loss(1000.0) == 0.0
    assert loss_derivative(-1000.0) == -1.0
    assert loss_derivative(1000.0) == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30))
def test_loss_derivative_is_derivative(z):
    h = 1e-5
    fd = (logistic_loss(z + h) - logistic_loss(z - h)) / (2 * h)
    assert loss_derivative(z) == pytest.approx(fd, abs=1e-8)
    assert -1 < loss_derivative(z) < 0


rows = arrays(np.float64, st.integers(2, 10), elements=st.floats(-20, 20))


@settings(max_examples=200, deadline=None)
@given(rows)
def test_softmax_jacobian_structure(z):
    J = softmax_jacobian(stable_softmax(z))
    assert np.abs(J.sum(axis=0)).max() < 1e-12 and np.abs(J.sum(axis=1)).max() < 1e-12
    assert np.all(np.diag(J) >= 0)
    off = J[~np.eye(len(z), dtype=bool)]
    assert np.all(off <= 0)
    assert np.array_equal(J, J.T)
    assert np.linalg.eigvalsh(J).min() >= -1e-10


def test_softmax_jacobian_is_the_derivative():
    z = np.array([0.3, -1.2, 2.0, 0.1])
    h = 1e-6
    fd = np.stack([(stable_softmax(z + h * e) - stable_softmax(z - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    np.testing.assert_allclose(softmax_jacobian(stable_softmax(z)), fd, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    params, data = tiny_instance(seed)
    a = analytic_gradients(params, data)
    f = finite_difference_gradients(params, data)
    assert max_relative_error(a, f) <= 1e-6


def test_value_gradient_has_rank_one(tiny):
    params, data = tiny
    g = analytic_gradients(params, data).g_WV
    s = np.linalg.svd(g, compute_uv=False)
    assert s[1] <= 1e-12 * s[0]


def test_loss_and_gradients_share_the_forward_pass(tiny):
    params, data = tiny
    loss, _ = loss_and_gradients(params, data)
    assert loss == empirical_loss(params, data)


def test_qk_rescaling_symmetry(tiny):
    # scaling W_Q by a and W_K by 1/a leaves logits, loss and the product structure unchanged
    params, data = tiny
    a = 2.0
    scaled = params.replace(W_Q=params.W_Q * a, W_K=params.W_K / a)
    assert empirical_loss(scaled, data) == pytest.approx(empirical_loss(params, data), rel=1e-13)
    g0, g1 = analytic_gradients(params, data), analytic_gradients(scaled, data)
    np.testing.assert_allclose(g1.g_WQ, g0.g_WQ / a, rtol=1e-10, atol=1e-16)
    np.testing.assert_allclose(g1.g_WK, g0.g_WK * a, rtol=1e-10, atol=1e-16)


def test_max_relative_error_floor_handles_exact_zeros():
    from attnlab.loss_grad import GradientSet
    z = np.zeros((2, 2))
    a = GradientSet(z, z, z)
    b = GradientSet(z + 1e-14, z, z)
    assert max_relative_error(a, b) < 1e-6
    c = GradientSet(z + 1.0, z, z)
    d = GradientSet(z + 1.0 + 1e-5, z, z)
    assert max_relative_error(c, d) == pytest.approx(1e-5, rel=1e-3)


def test_empty_dataset_loss_raises(tiny):
    params, data = tiny
    with pytest.raises(ValueError, match="empty"):
        empirical_loss(params, data.subset(np.array([], dtype=int)))
