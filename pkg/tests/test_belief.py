import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import grid_posterior
from sparse_sense import _kernels
from sparse_sense.belief import (
    IDENTITY,
    P_MAX,
    P_MIN,
    BeliefState,
    EffortFunction,
    PriorParams,
    effective_precision,
    init_state,
    posterior_update,
    predictive_sample,
    snr_to_sigma_sq,
    update,
)
from sparse_sense.errors import BudgetViolationError, NoObservationError, ParameterError


def test_prior_validation():
    with pytest.raises(ParameterError):
        PriorParams(1.5, 1, 1, 1, 1, 1)
    with pytest.raises(ParameterError):
        PriorParams(0.1, 1, 1, 0.0, 1, 1)
    with pytest.raises(ParameterError):
        PriorParams(0.1, 1, 1, 1, -1, 1)
    pr = PriorParams(0.01, 1.0, 1 / 16, 0.01, 100, 100)
    assert pr.snr_db == pytest.approx(20.0)


def test_init_state_copies_prior():
    st_ = init_state(PriorParams(0.05, 2.0, 0.5, 1.0, 30.0, 3))
    np.testing.assert_array_equal(st_.p, [0.05] * 3)
    np.testing.assert_array_equal(st_.mu, [2.0] * 3)
    np.testing.assert_array_equal(st_.sigma_sq_i, [0.5] * 3)
    assert st_.budget_remaining == 30.0 and st_.t == 0


def test_zero_effort_leaves_state_unchanged():
    st0 = init_state(PriorParams(0.2, 1.0, 0.3, 1.0, 5.0, 4))
    st1 = update(st0, np.zeros(4), np.full(4, np.nan), 1.0)
    np.testing.assert_array_equal(st1.p, st0.p)
    np.testing.assert_array_equal(st1.mu, st0.mu)
    np.testing.assert_array_equal(st1.sigma_sq_i, st0.sigma_sq_i)
    assert st1.t == 1


def test_single_update_closed_form():
    # with h = 1, sigma^2 = 1, sigma_i^2 = 1: variance halves and the mean is the average
    st0 = BeliefState(np.array([0.5]), np.array([1.0]), np.array([1.0]), 1.0)
    st1 = update(st0, np.array([1.0]), np.array([3.0]), 1.0)
    assert st1.sigma_sq_i[0] == pytest.approx(0.5)
    assert st1.mu[0] == pytest.approx(2.0)
    # likelihood ratio N(3; 1, 2) / N(3; 0, 1)
    lr = np.exp(-4 / 4) / np.sqrt(2) / np.exp(-9 / 2)
    assert st1.p[0] == pytest.approx(lr / (1 + lr))


def test_update_matches_grid_bayes_small():
    p, mu, s2 = grid_posterior(0.1, 1.0, 0.25, [0.7, 1.3], [1.0, 2.0], 0.5)
    st0 = BeliefState(np.array([0.1]), np.array([1.0]), np.array([0.25]), 3.0)
    st1 = update(st0, np.array([1.0]), np.array([0.7]), 0.5)
    st2 = update(st1, np.array([2.0]), np.array([1.3]), 0.5)
    assert st2.p[0] == pytest.approx(p, abs=1e-9)
    assert st2.mu[0] == pytest.approx(mu, abs=1e-9)
    assert st2.sigma_sq_i[0] == pytest.approx(s2, abs=1e-9)


def test_absorbing_probabilities():
    st0 = BeliefState(np.array([0.0, 1.0]), np.zeros(2), np.ones(2), 4.0)
    st1 = update(st0, np.array([1.0, 1.0]), np.array([5.0, -5.0]), 1.0)
    np.testing.assert_array_equal(st1.p, [0.0, 1.0])


def test_probability_clamped_away_from_absorbing_states():
    st0 = BeliefState(np.array([0.5, 0.5]), np.array([1.0, 1.0]), np.array([1e-4, 1e-4]), 2e8)
    st1 = update(st0, np.array([1e8, 1e8]), np.array([1.0, 0.0]), 1.0)
    assert st1.p[0] == P_MAX
    assert st1.p[1] == P_MIN


def test_budget_violation():
    st0 = init_state(PriorParams(0.1, 1.0, 1.0, 1.0, 2.0, 2))
    with pytest.raises(BudgetViolationError):
        update(st0, np.array([1.5, 1.0]), np.array([0.0, 0.0]), 1.0)


def test_missing_observation():
    st0 = init_state(PriorParams(0.1, 1.0, 1.0, 1.0, 2.0, 2))
    with pytest.raises(NoObservationError):
        update(st0, np.array([1.0, 0.0]), np.array([np.nan, np.nan]), 1.0)
    with pytest.raises(ParameterError):
        update(st0, np.array([-1.0, 0.0]), np.array([0.0, 0.0]), 1.0)


def test_effective_precision_accumulates():
    sigma_sq, s0 = 0.5, 0.25
    st_ = BeliefState(np.array([0.3]), np.array([1.0]), np.array([s0]), 10.0)
    total = 0.0
    for lam, y in [(1.0, 0.3), (2.5, 1.1), (0.2, -0.4)]:
        st_ = update(st_, np.array([lam]), np.array([y]), sigma_sq)
        total += lam
    assert effective_precision(st_, 0.0, sigma_sq)[0] == pytest.approx(sigma_sq / s0 + total)


def test_effort_functions():
    assert IDENTITY.is_identity
    h = EffortFunction.power(0.5)
    assert h(4.0) == pytest.approx(2.0)
    assert h(1.0) == pytest.approx(1.0)
    tab = EffortFunction.tabulated([0, 1, 2], [0, 2, 3])
    assert tab(1.0) == pytest.approx(1.0)
    assert tab(3.0) == pytest.approx(2.0)  # extended with the last slope
    with pytest.raises(ParameterError):
        EffortFunction.tabulated([0, 1, 2], [0, 1, 3])  # convex
    with pytest.raises(ParameterError):
        EffortFunction.power(1.5)


def test_snr_conversion():
    assert snr_to_sigma_sq(0, 1) == 1
    assert snr_to_sigma_sq(20, 1) == pytest.approx(0.01)
    pr = PriorParams(0.1, 2.0, 1.0, snr_to_sigma_sq(7.3, 2.0), 1, 1)
    assert pr.snr_db == pytest.approx(7.3, abs=1e-12)
    with pytest.raises(ParameterError):
        snr_to_sigma_sq(10, 0)


def test_kernel_update_matches_reference(rng):
    M, N = 4, 50
    p = rng.uniform(0, 1, (M, N))
    p[0, :3] = [0.0, 1.0, 1e-30]
    mu = rng.normal(size=(M, N))
    s2 = rng.uniform(0.01, 2, (M, N))
    theta = rng.normal(size=(M, N))
    noise = rng.normal(size=(M, N))
    hv = rng.uniform(0, 3, (M, N))
    hv[hv < 0.5] = 0.0
    sigma_sq = 0.7
    y_ref = np.where(hv > 0, theta + noise * np.sqrt(sigma_sq / np.where(hv > 0, hv, 1)), np.nan)
    ref = posterior_update(p, mu, s2, np.nan_to_num(y_ref), hv, sigma_sq)
    pk, mk, sk = p.copy(), mu.copy(), s2.copy()
    y = np.empty((M, N))
    _kernels.observe_update(pk, mk, sk, theta, noise, hv, sigma_sq, sigma_sq, y)
    np.testing.assert_allclose(pk, ref[0], rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(mk, ref[1], rtol=1e-12)
    np.testing.assert_allclose(sk, ref[2], rtol=1e-12)
    np.testing.assert_array_equal(np.isnan(y), hv == 0)


def test_predictive_sample_moments(rng):
    st_ = BeliefState(np.array([0.3]), np.array([2.0]), np.array([0.5]), 1.0)
    y = predictive_sample(st_, 0, 2.0, 1.0, rng, size=200_000)
    assert y.mean() == pytest.approx(0.3 * 2.0, abs=4 * y.std() / np.sqrt(y.size))
    with pytest.raises(NoObservationError):
        predictive_sample(st_, 0, 0.0, 1.0, rng)


@given(
    p=st.floats(0.0, 1.0),
    mu=st.floats(-3, 3),
    s2=st.floats(1e-3, 5),
    y=st.floats(-20, 20),
    h=st.floats(1e-6, 1e4),
    sigma_sq=st.floats(1e-3, 10),
)
def test_update_invariants(p, mu, s2, y, h, sigma_sq):
    pn, mn, sn = posterior_update(np.array([p]), np.array([mu]), np.array([s2]), np.array([y]), np.array([h]),
                                  sigma_sq)
    assert 0.0 <= pn[0] <= 1.0
    assert 0 < sn[0] <= s2
    assert np.isfinite(mn[0])
    # the updated mean lies between the prior mean and the observation
    assert min(mu, y) - 1e-9 <= mn[0] <= max(mu, y) + 1e-9
    if p in (0.0, 1.0):
        assert pn[0] == p
