import math

import numpy as np
import pytest

from sparse_sense import harness
from sparse_sense.belief import IDENTITY, EffortFunction, PriorParams
from sparse_sense.engine import Batch, Channel, apply_allocation
from sparse_sense.errors import ParameterError
from sparse_sense.harness import (
    CSV_HEADER,
    SimConfig,
    full_scale,
    generate_signal,
    observe,
    parse_config,
    results_csv,
    run_experiment,
    run_trial,
    stream,
)


def small_config(**kw):
    base = dict(prior=PriorParams(0.05, 1.0, 1 / 16, 1.0, 200.0, 200), T_list=(2, 3), snr_db=(15.0,),
                policies=("nonadaptive", "oracle", "ds", "olfc"), trials=40, seed=11, batch_size=16)
    base.update(kw)
    return SimConfig(**base)


def test_streams_are_reproducible_and_role_separated():
    a = stream(3, 7, 0).standard_normal(5)
    np.testing.assert_array_equal(a, stream(3, 7, 0).standard_normal(5))
    assert not np.allclose(a, stream(3, 7, 1).standard_normal(5))
    assert not np.allclose(a, stream(3, 8, 0).standard_normal(5))


def test_signal_examples(rng):
    active, theta = generate_signal(PriorParams(1.0, 1.0, 0.1, 1.0, 10.0, 10), rng=rng)
    assert active.all()
    active, theta = generate_signal(PriorParams(0.5, 2.0, 0.0, 1.0, 10.0, 1000), rng=rng)
    np.testing.assert_array_equal(theta[active], 2.0)
    pr = PriorParams(0.01, 1.0, 1 / 16, 1.0, 1.0, 100_000)
    frac = np.mean([generate_signal(pr, rng=rng)[0].mean() for _ in range(30)])
    se = math.sqrt(0.01 * 0.99 / (30 * 100_000))
    assert abs(frac - 0.01) < 4 * se


def test_observe_examples(rng):
    theta = np.zeros(200_000)
    y = observe(theta, np.ones_like(theta), IDENTITY, 0.7, rng)
    # sample variance of 2e5 Gaussians: relative sd sqrt(2/n)
    assert abs(y.var() / 0.7 - 1) < 4 * math.sqrt(2 / theta.size)
    y = observe(theta[:10_000], np.full(10_000, 1e6), IDENTITY, 1.0, rng)
    assert np.mean(np.abs(y) < 5e-3) >= 0.99
    y = observe(np.ones(3), np.array([0.0, 1.0, 0.0]), IDENTITY, 1.0, rng)
    assert np.isnan(y[0]) and np.isnan(y[2]) and np.isfinite(y[1])
    with pytest.raises(ParameterError):
        observe(np.ones(2), np.array([-1.0, 1.0]), IDENTITY, 1.0, rng)


@pytest.mark.parametrize("kind,T", [("nonadaptive", 1), ("oracle", 1), ("ds", 3), ("olfc", 3)])
def test_trials_are_bit_identical(kind, T):
    cfg = small_config()
    a = run_trial(cfg, kind, T, 15.0, 4)
    b = run_trial(cfg, kind, T, 15.0, 4)
    assert a.losses == b.losses
    np.testing.assert_array_equal(a.stage_budget, b.stage_budget)


def test_trial_matches_its_batch():
    cfg = small_config()
    block = harness.run_batch(cfg, "olfc", 3, 15.0, range(5))
    assert run_trial(cfg, "olfc", 3, 15.0, 3).losses == block[3].losses


def test_zero_signal_has_zero_loss():
    cfg = small_config(prior=PriorParams(0.0, 1.0, 1 / 16, 1.0, 50.0, 50))
    with pytest.warns(RuntimeWarning, match="uniform allocation"):
        m = run_trial(cfg, "olfc", 2, 10.0, 0)
    assert m.support_size == 0 and m.losses["mse"] == 0.0


@pytest.mark.parametrize("kind,T", [("nonadaptive", 1), ("oracle", 1), ("ds", 2), ("ds", 3), ("olfc", 2),
                                    ("olfc", 3)])
def test_budget_is_spent_exactly(kind, T):
    cfg = small_config()
    for m in harness.run_batch(cfg, kind, T, 15.0, range(10)):
        assert m.stage_budget.sum() == pytest.approx(200.0, rel=1e-9)


def test_nonadaptive_posterior_variance_per_active_component(rng):
    # uniform unit effort leaves every amplitude variance at sigma^2 / (sigma^2/sigma0^2 + 1)
    pr = PriorParams(0.2, 1.0, 1 / 16, 1.0, 500.0, 500)
    batch = Batch.from_prior(pr, 3)
    theta = np.where(rng.random((3, 500)) < 0.2, 1.0, 0.0)
    apply_allocation(batch, np.ones((3, 500)), theta, rng.standard_normal((3, 500)), Channel(1.0))
    np.testing.assert_allclose(batch.s2, 1.0 / (1.0 / (1 / 16) + 1.0), rtol=1e-15)
    np.testing.assert_allclose(batch.budget, 0.0, atol=1e-9)


def test_oracle_error_matches_gaussian_mean_estimation():
    # at high SNR almost every posterior weight is 1 and the error is the conjugate posterior variance
    cfg = small_config(prior=PriorParams(0.05, 1.0, 1 / 16, 1.0, 400.0, 400), trials=300)
    snr = 30.0
    sigma_sq = 10 ** (-snr / 10)
    res = harness.run_batch(cfg, "oracle", 1, snr, range(cfg.trials))
    vals, expect = [], []
    for m in res:
        k = m.support_size
        if k:
            vals.append(m.losses["mse"])
            expect.append(k / (16.0 + (400.0 / k) / sigma_sq))
    vals, expect = np.array(vals), np.array(expect)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - expect.mean()) < 4 * se
    # approximately sigma^2 / (Lambda0 / |support|) per active component
    assert np.mean(vals / [m.support_size for m in res if m.support_size]) == pytest.approx(
        sigma_sq / 20, rel=0.1)


def test_nonadaptive_only_gives_zero_gain():
    res = run_experiment(small_config(policies=("nonadaptive",), trials=10))
    assert [r.gain_db for r in res] == [0.0]


def test_experiment_csv_and_determinism():
    cfg = small_config(trials=20)
    text = results_csv(run_experiment(cfg))
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert text == results_csv(run_experiment(cfg))
    rows = text.splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["nonadaptive", "oracle", "ds", "ds", "olfc", "olfc"]


def test_baseline_runs_even_when_not_requested():
    res = run_experiment(small_config(policies=("olfc",), T_list=(2,), trials=10))
    assert len(res) == 1 and np.isfinite(res[0].gain_db)


def test_mismatch_changes_only_the_policy_side():
    cfg = small_config()
    mis = small_config(assumed_p0=0.2, assumed_snr_offset_db=3.0)
    a = run_trial(cfg, "oracle", 1, 15.0, 2)
    b = run_trial(mis, "oracle", 1, 15.0, 2)
    assert a.support_size == b.support_size
    assert mis.true_prior(15.0) == cfg.true_prior(15.0)
    assert mis.assumed_prior(15.0).p0 == 0.2
    assert mis.assumed_snr(15.0) == pytest.approx(18.0)


def test_parse_config():
    cfg = parse_config("""
        # comment
        p0 = 0.02
        N = 300
        T = 2, 4
        snr_db = -10:10:5
        policies = olfc, ds
        losses = mse, mae
        h = power:0.5
        seed = 9
    """)
    assert cfg.prior.p0 == 0.02 and cfg.prior.N == 300 and cfg.prior.Lambda0 == 300.0
    assert cfg.T_list == (2, 4)
    np.testing.assert_allclose(cfg.snr_db, [-10, -5, 0, 5, 10])
    assert cfg.policies == ("olfc", "ds")
    assert [s.name for s in cfg.losses] == ["mse", "mae"]
    assert cfg.h == EffortFunction.power(0.5)
    for bad in ("colour = red", "trials = many", "just words", "policies = greedy"):
        with pytest.raises(ParameterError):
            parse_config(bad)


def test_full_scale():
    cfg = full_scale(small_config())
    assert cfg.prior.N == 10000 and cfg.prior.Lambda0 == 10000.0 and cfg.trials == 4000
