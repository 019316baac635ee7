import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given
from hypothesis import strategies as st

from sparse_sense.errors import ParameterError
from sparse_sense.losses import (
    MAE,
    MSE,
    LossSpec,
    check_g_convexity,
    expected_loss,
    g_kernel,
    g_kernel_derivative,
    g_kernel_quad,
    loss,
)

SHIPPED = [MSE, MAE, LossSpec("power", 0.5), LossSpec("zero_one", 0.1), LossSpec("exponential", 2.0),
           LossSpec("log", 1.0), LossSpec("huber", 0.3)]


def trapezoid_g(spec, s2, hbar, sigma_sq, n=400_001):
    """Independent oracle: dense trapezoid rule for the half-line Gaussian integral."""
    s = math.sqrt(sigma_sq / (sigma_sq / s2 + hbar))
    th = np.linspace(0, 12, n)
    if spec.kind in ("zero_one", "huber"):
        # put the kink or jump on the grid, approached from both sides
        cut = spec.param / s
        if cut < 12:
            th = np.sort(np.concatenate((th, [cut, np.nextafter(cut, np.inf)])))
    vals = loss(spec, s * th) * np.exp(-th**2 / 2) / math.sqrt(2 * math.pi)
    return trapezoid(vals, th)


def test_mse_kernel_value():
    # half of the posterior variance 1/(1+1)
    assert g_kernel(MSE, 1.0, 1.0, 1.0) == pytest.approx(0.25)


def test_zero_one_kernel_value():
    assert g_kernel(LossSpec("zero_one", 1.0), 1.0, 0.0, 1.0) == pytest.approx(0.158655253931457)


@pytest.mark.parametrize("spec", SHIPPED, ids=lambda s: s.name)
def test_kernel_matches_trapezoid(spec):
    for s2, hb, sig in [(1.0, 0.0, 1.0), (0.2, 3.0, 0.5), (5.0, 40.0, 2.0)]:
        assert g_kernel(spec, s2, hb, sig) == pytest.approx(trapezoid_g(spec, s2, hb, sig), abs=2e-7, rel=1e-6)


@pytest.mark.parametrize("spec", [MSE, MAE, LossSpec("zero_one", 0.4), LossSpec("huber", 0.3)], ids=lambda s: s.name)
def test_closed_forms_match_quadrature(spec):
    h = np.linspace(0, 20, 11)
    np.testing.assert_allclose(g_kernel(spec, 0.7, h, 1.3), g_kernel_quad(spec, 0.7, h, 1.3), atol=1e-9)


@pytest.mark.parametrize("spec", SHIPPED, ids=lambda s: s.name)
def test_derivative_matches_finite_difference(spec):
    h, d = 2.0, 1e-5
    fd = (g_kernel(spec, 0.8, h + d, 0.6) - g_kernel(spec, 0.8, h - d, 0.6)) / (2 * d)
    assert g_kernel_derivative(spec, 0.8, h, 0.6) == pytest.approx(fd, rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("spec", SHIPPED, ids=lambda s: s.name)
def test_shipped_losses_give_convex_kernels(spec):
    assert check_g_convexity(spec).passed


def test_exponential_loss_fails_sufficient_condition_only():
    rep = check_g_convexity(LossSpec("exponential", 2.0))
    assert not rep.condition_holds
    assert rep.g_convex


def test_loss_domain_and_parsing():
    with pytest.raises(ParameterError):
        loss(MSE, -1.0)
    with pytest.raises(ParameterError):
        LossSpec("cubic", 1.0)
    with pytest.raises(ParameterError):
        LossSpec("power", 0.0)
    assert LossSpec.parse("mse") == MSE
    assert LossSpec.parse("huber:0.5") == LossSpec("huber", 0.5)
    assert MAE.gamma == pytest.approx(2 / 3)
    with pytest.raises(ParameterError):
        LossSpec("log", 1.0).gamma


def test_expected_loss_at_mean_is_twice_kernel():
    # the kernel drops the factor 2 of the symmetric integral
    for spec in SHIPPED:
        el = expected_loss(spec, 0.3, 0.3, 0.5)
        assert el == pytest.approx(2 * g_kernel(spec, 0.5, 0.0, 0.5), rel=1e-6, abs=1e-9)


@given(h1=st.floats(0, 50), h2=st.floats(0, 50), s2=st.floats(0.01, 10))
def test_mse_kernel_monotone_decreasing(h1, h2, s2):
    lo, hi = sorted((h1, h2))
    assert g_kernel(MSE, s2, hi, 1.0) <= g_kernel(MSE, s2, lo, 1.0) + 1e-15
