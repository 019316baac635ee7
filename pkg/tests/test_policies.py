import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparse_sense.allocator import AllocationProblem, waterfill_power_law
from sparse_sense.belief import BeliefState, PriorParams, init_state, update
from sparse_sense.engine import Batch, Channel, terminal_cost
from sparse_sense.errors import ParameterError
from sparse_sense.losses import MAE, MSE, g_kernel
from sparse_sense.policies import (
    PolicyParams,
    alpha_to_beta,
    beta_to_alpha,
    ds_allocate,
    ds_fractions,
    ds_refine,
    gamma_schedule,
    generalized_params,
    nonadaptive_allocate,
    olfc_allocate,
    oracle_allocate,
    rollout_allocate,
    rollout_cost_curve,
)


def prior(N=100, Lambda0=None, p0=0.05, sigma_sq=0.1):
    return PriorParams(p0, 1.0, 1 / 16, sigma_sq, float(N) if Lambda0 is None else Lambda0, N)


def test_nonadaptive_examples():
    np.testing.assert_allclose(nonadaptive_allocate(prior(50)).lam, 1.0)
    np.testing.assert_allclose(nonadaptive_allocate(prior(50, 100.0)).lam, 2.0)
    np.testing.assert_allclose(nonadaptive_allocate(prior(1, 7.0)).lam, [7.0])
    with pytest.raises(ParameterError):
        nonadaptive_allocate(prior(), t=1)


def test_oracle_examples():
    sup = np.zeros(100, bool)
    sup[:5] = True
    plan = oracle_allocate(sup, 0, 1, 100.0)
    np.testing.assert_allclose(plan.lam[:5], 20.0)
    assert plan.lam[5:].sum() == 0
    np.testing.assert_allclose(oracle_allocate(np.ones(10, bool), 0, 1, 10.0).lam, 1.0)
    one = np.zeros(10, bool)
    one[3] = True
    assert oracle_allocate(one, 0, 1, 10.0).lam[3] == 10.0
    with pytest.warns(RuntimeWarning):
        plan = oracle_allocate(np.zeros(4, bool), 0, 1, 8.0)
    np.testing.assert_allclose(plan.lam, 2.0)


def test_ds_fraction_examples():
    np.testing.assert_allclose(ds_fractions(3), [4 / 11, 3 / 11, 4 / 11], rtol=1e-15)
    np.testing.assert_allclose(ds_fractions(2), [0.5, 0.5])
    for T in range(2, 11):
        assert abs(ds_fractions(T).sum() - 1.0) < 1e-12
    with pytest.raises(ParameterError):
        ds_fractions(1)


def test_ds_allocation_and_refinement():
    ws = np.ones(8, bool)
    plan = ds_allocate(ws, 0, 3, 8.0)
    np.testing.assert_allclose(plan.lam, 4 / 11)
    with pytest.warns(RuntimeWarning):
        new = ds_refine(ws, -np.arange(1.0, 9.0))
    assert new.tolist() == [True] + [False] * 7
    # rows are independent
    both = ds_refine(np.ones((2, 3), bool), np.array([[1.0, -1.0, 2.0], [-1.0, 0.5, -2.0]]))
    assert both.tolist() == [[True, False, True], [False, True, False]]


def test_ds_null_signal_halves_working_set(rng):
    N = 200_000
    ws = np.ones(N, bool)
    sizes = [N]
    for _ in range(4):
        y = np.where(ws, rng.standard_normal(N), np.nan)
        ws = ds_refine(ws, y)
        sizes.append(int(ws.sum()))
    for a, b in zip(sizes, sizes[1:]):
        # binomial(a, 1/2) oracle
        assert abs(b - a / 2) < 4 * np.sqrt(a / 4)


def test_gamma_schedule_examples():
    np.testing.assert_allclose(gamma_schedule(0.5, 2, 4), 0.5)
    np.testing.assert_allclose(gamma_schedule(0.2, 2, 2), [0.2, 0.5])
    np.testing.assert_allclose(gamma_schedule(0.3, 2, 5), [0.3, 0.35, 0.4, 0.45, 0.5], atol=1e-15)
    with pytest.raises(ParameterError):
        gamma_schedule(0.6, 2, 3)


def test_generalized_params_reuse_first_stage_values():
    pp = generalized_params([1.0, 0.4, 0.3, 0.2], 0.3)
    np.testing.assert_allclose(pp.beta, [0.2, 0.3, 0.4, 1.0])
    np.testing.assert_allclose(pp.gamma, gamma_schedule(0.3, 2, 4))
    with pytest.raises(ParameterError):
        generalized_params([0.5, 0.4], 0.3)


def test_policy_params_validation_and_immutability():
    with pytest.raises(ParameterError):
        PolicyParams(2, "olfc", [0.5, 0.5])
    with pytest.raises(ParameterError):
        PolicyParams(2, "olfc", [1.5, 1.0])
    with pytest.raises(ParameterError):
        PolicyParams(2, "nonadaptive")
    with pytest.raises(ParameterError):
        PolicyParams(1, "greedy")
    pp = PolicyParams(2, "olfc", [0.5, 1.0])
    with pytest.raises(ValueError):
        pp.beta[0] = 0.1
    np.testing.assert_allclose(PolicyParams(3, "ds").alpha, ds_fractions(3))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_alpha_beta_round_trip(raw):
    beta = np.array(raw + [1.0])
    alpha = beta_to_alpha(beta)
    assert alpha.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(beta_to_alpha(alpha_to_beta(alpha)), alpha, atol=1e-12)


def test_single_stage_olfc_is_the_waterfilling_optimum(rng):
    st_ = BeliefState(rng.uniform(0, 1, 20), np.ones(20), rng.uniform(0.1, 1, 20), 12.0)
    plan = olfc_allocate(st_, 0, PolicyParams(1), 0.3)
    ref = waterfill_power_law(AllocationProblem(st_.p, st_.sigma_sq_i, 0.3, 12.0)).lambda_bar
    np.testing.assert_allclose(plan.lam, ref, atol=1e-10)


def test_two_stage_uniform_prior_first_stage_is_uniform():
    plan = olfc_allocate(init_state(prior(40)), 0, PolicyParams(2, "olfc", [0.35, 1.0]), 0.1)
    np.testing.assert_allclose(plan.lam, 0.35, rtol=1e-12)


def test_zero_fraction_stage_is_a_no_op():
    st0 = init_state(prior(10))
    plan = olfc_allocate(st0, 0, PolicyParams(2, "olfc", [0.0, 1.0]), 0.1)
    assert plan.total == 0
    st1 = update(st0, plan.lam, np.full(10, np.nan), 0.1)
    np.testing.assert_array_equal(st1.p, st0.p)
    assert st1.budget_remaining == st0.budget_remaining


@pytest.mark.parametrize("loss", [MSE, MAE], ids=lambda s: s.name)
def test_full_olfc_run_spends_exact_budget(rng, loss):
    pr = prior(60, 90.0, sigma_sq=0.05)
    pp = generalized_params([1.0, 0.5, 0.4, 0.3], 0.25 if loss is MSE else 0.5, loss)
    theta = np.where(rng.random(60) < pr.p0, 1 + 0.25 * rng.standard_normal(60), 0.0)
    st_ = init_state(pr)
    spent = 0.0
    for t in range(pp.T):
        plan = olfc_allocate(st_, t, pp, pr.sigma_sq)
        y = np.where(plan.lam > 1e-12, theta + rng.standard_normal(60) * np.sqrt(pr.sigma_sq / np.maximum(plan.lam, 1e-300)), np.nan)
        st_ = update(st_, plan.lam, y, pr.sigma_sq)
        spent += plan.total
    assert spent == pytest.approx(90.0, rel=1e-9)


def test_rollout_exact_entry_matches_closed_form(rng):
    pr = prior(30, sigma_sq=0.05)
    st_ = BeliefState(rng.uniform(0, 0.3, 30), np.ones(30), np.full(30, 1 / 16), 30.0)
    pp = PolicyParams(3, "rollout", [0.3, 0.5, 1.0])
    costs, errs = rollout_cost_curve(st_, 0, pp, pr.sigma_sq, 50, rng)
    lam = waterfill_power_law(AllocationProblem(st_.p, st_.sigma_sq_i, pr.sigma_sq, 30.0)).lambda_bar
    exact = np.sum(st_.p * g_kernel(MSE, st_.sigma_sq_i, lam, pr.sigma_sq))
    assert abs(costs[-1] - exact) < 1e-10
    assert errs[-1] == 0
    assert costs[-1] == pytest.approx(terminal_cost(Batch.from_state(st_, 1), Channel(pr.sigma_sq))[0])


def test_rollout_validation_and_last_stage(rng):
    st_ = init_state(prior(10))
    pp = PolicyParams(2, "rollout", [0.5, 1.0])
    with pytest.raises(ParameterError):
        rollout_allocate(st_, 0, pp, 0.1, 0, rng)
    plan = rollout_allocate(st_, 1, pp, 0.1, 10, rng)
    assert plan.total == pytest.approx(10.0)


def test_rollout_keeps_the_cheaper_of_fit_and_base():
    st_ = init_state(prior(40, sigma_sq=0.03))
    for base in (0.05, 0.5, 0.95):
        plan = rollout_allocate(st_, 0, PolicyParams(3, "rollout", [base, 0.5, 1.0]), 0.03, 60,
                                np.random.default_rng(3))
        fit_cost, base_cost = plan.info["candidate_costs"]
        assert plan.info["base_beta"] == base
        assert plan.info["beta"] == (plan.info["fit_beta"] if fit_cost <= base_cost else base)
        assert plan.total == pytest.approx(plan.info["beta"] * 40.0, rel=1e-9)


def test_rollout_is_deterministic_given_generator():
    st_ = init_state(prior(40, sigma_sq=0.03))
    pp = PolicyParams(2, "rollout", [0.5, 1.0])
    a = rollout_allocate(st_, 0, pp, 0.03, 40, np.random.default_rng(5))
    b = rollout_allocate(st_, 0, pp, 0.03, 40, np.random.default_rng(5))
    assert a.info["beta"] == b.info["beta"]
    np.testing.assert_array_equal(a.lam, b.lam)
