"""Effort-allocation policies.

Each policy maps a belief state (or, for the oracle, the true support) and
a stage index to an :class:`AllocationPlan`.  The generalized OLFC family
spends a fraction ``beta[t]`` of the remaining budget in proportion to the
water-filling solution with exponent ``gamma[t]``; rollout re-optimizes
that fraction online by simulating the generalized policy forward.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .belief import IDENTITY, BeliefState, EffortFunction, PriorParams
from .engine import Batch, Channel, olfc_allocation, olfc_step, run_schedule, sample_posterior_truth, terminal_cost
from .errors import ParameterError
from .losses import MSE, LossSpec

KINDS = ("nonadaptive", "oracle", "ds", "olfc", "rollout")
DS_RATIO = 0.75
ROLLOUT_GRID = np.linspace(0.0, 1.0, 21)


@dataclass(frozen=True)
class PolicyParams:
    """Stage schedules of one policy.

    ``beta[t]`` is the fraction of the remaining budget spent at stage t and
    ``gamma[t]`` the water-filling exponent.  Single-stage policies have
    ``T = 1``; for DS the schedule is the one implied by its stage fractions.
    """

    T: int
    kind: str = "olfc"
    beta: np.ndarray = None
    gamma: np.ndarray = None
    ds_ratio: float = DS_RATIO
    loss: LossSpec = MSE
    mc_budget: int = 200

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        T = int(self.T)
        if T < 1:
            raise ParameterError("T must be >= 1")
        if self.kind in ("nonadaptive", "oracle") and T != 1:
            raise ParameterError(f"{self.kind} is a single-stage policy")
        gf = self.loss.gamma if self.loss.is_power else 1.0
        beta, gamma = self.beta, self.gamma
        if beta is None:
            if self.kind == "ds":
                beta = alpha_to_beta(ds_fractions(T, self.ds_ratio)) if T > 1 else np.ones(1)
            elif T == 1:
                beta = np.ones(1)
            else:
                raise ParameterError(f"{self.kind} with T={T} needs a beta schedule")
        if gamma is None:
            gamma = np.full(T, gf)
        beta = np.array(beta, dtype=float)
        gamma = np.array(gamma, dtype=float)
        if beta.shape != (T,) or gamma.shape != (T,):
            raise ParameterError("beta and gamma must have length T")
        if np.any((beta < 0) | (beta > 1)):
            raise ParameterError("beta must lie in [0, 1]")
        if beta[-1] != 1.0:
            raise ParameterError("the final stage must spend the whole remaining budget (beta[T-1] = 1)")
        beta.flags.writeable = False
        gamma.flags.writeable = False
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

    @property
    def alpha(self) -> np.ndarray:
        """Fraction of the total budget spent at each stage."""
        return beta_to_alpha(self.beta)

    @property
    def label(self) -> str:
        return self.kind if self.T == 1 and self.kind in ("nonadaptive", "oracle") else f"{self.kind}-{self.T}"


@dataclass
class AllocationPlan:
    lam: np.ndarray
    t: int
    policy: str
    info: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(np.sum(self.lam))


def beta_to_alpha(beta) -> np.ndarray:
    """Per-stage share of the total budget from remaining-budget fractions."""
    beta = np.asarray(beta, dtype=float)
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - beta)[:-1]))
    return beta * remaining


def alpha_to_beta(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    remaining = 1.0 - np.concatenate(([0.0], np.cumsum(alpha)[:-1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(remaining > 0, alpha / remaining, 1.0)
    beta = np.clip(beta, 0.0, 1.0)
    beta[-1] = 1.0
    return beta


def gamma_schedule(gamma0: float, q: float, T: int) -> np.ndarray:
    """Exponents rising linearly from ``gamma0`` to 2/(q+2) over T stages."""
    gf = 2.0 / (q + 2.0)
    if not (np.isfinite(gamma0) and gamma0 <= gf + 1e-12):
        raise ParameterError(f"gamma0 must not exceed 2/(q+2) = {gf:g}, got {gamma0}")
    if T == 1:
        return np.array([gf])
    return gamma0 + (gf - gamma0) * np.arange(T) / (T - 1)


def generalized_params(beta_first, gamma0: float, loss: LossSpec = MSE, kind: str = "olfc") -> PolicyParams:
    """Assemble a T-stage schedule from first-stage fractions of shorter policies.

    ``beta_first[s - 1]`` is the first-stage fraction of the s-stage policy,
    so ``beta_first[0]`` must be 1.  Stage t of the T-stage policy reuses
    the (T - t)-stage value.
    """
    beta_first = np.asarray(beta_first, dtype=float)
    T = beta_first.size
    if T < 1 or abs(beta_first[0] - 1.0) > 1e-12:
        raise ParameterError("beta_first must start with the single-stage value 1")
    beta = beta_first[::-1].copy()
    beta[-1] = 1.0
    return PolicyParams(T, kind, beta, gamma_schedule(gamma0, loss.param, T), loss=loss)


def nonadaptive_allocate(prior: PriorParams, t: int = 0) -> AllocationPlan:
    if t != 0:
        raise ParameterError("the non-adaptive policy has a single stage")
    return AllocationPlan(np.full(prior.N, prior.Lambda0 / prior.N), 0, "nonadaptive")


def oracle_allocate(true_support, t: int, T: int, Lambda0: float) -> AllocationPlan:
    """Whole budget spread evenly over the true support in one stage."""
    support = np.asarray(true_support, dtype=bool)
    lam = np.zeros(support.shape)
    k = int(support.sum())
    if k == 0:
        warnings.warn("empty true support; the oracle falls back to a uniform allocation", RuntimeWarning,
                      stacklevel=2)
        lam[:] = Lambda0 / support.size
    else:
        lam[support] = Lambda0 / k
    return AllocationPlan(lam, t, "oracle")


def ds_fractions(T: int, ratio: float = DS_RATIO) -> np.ndarray:
    """Geometrically decaying stage shares with a final stage equal to the first."""
    if int(T) < 2:
        raise ParameterError("distilled sensing needs at least two stages")
    if not ratio > 0:
        raise ParameterError("ratio must be positive")
    T = int(T)
    shape = np.concatenate(([1.0], ratio ** np.arange(1, T - 1), [1.0]))
    return shape / shape.sum()


def ds_allocate(working_set, t: int, T: int, Lambda0: float, ratio: float = DS_RATIO) -> AllocationPlan:
    """Stage budget spread evenly over the working set (works row-wise on 2-D sets)."""
    working_set = np.asarray(working_set, dtype=bool)
    alpha = ds_fractions(T, ratio)[t]
    size = working_set.sum(axis=-1, keepdims=True)
    lam = np.where(working_set, alpha * Lambda0 / np.maximum(size, 1), 0.0)
    return AllocationPlan(lam, t, "ds")


def ds_refine(working_set, y):
    """Keep the components whose observation is positive.

    A set that would become empty keeps only its largest observation.
    Works row-wise on 2-D inputs.
    """
    working_set = np.asarray(working_set, dtype=bool)
    y = np.asarray(y, dtype=float)
    new = working_set & (np.nan_to_num(y, nan=-np.inf) > 0)
    empty = ~new.any(axis=-1)
    if np.any(empty & working_set.any(axis=-1)):
        warnings.warn("distilled sensing emptied its working set; keeping the largest observation",
                      RuntimeWarning, stacklevel=2)
        masked = np.where(working_set, np.nan_to_num(y, nan=-np.inf), -np.inf)
        best = np.argmax(masked, axis=-1)
        if new.ndim == 1:
            new[best] = True
        else:
            rows = np.nonzero(empty)[0]
            new[rows, best[rows]] = True
    return new


def _check_stage(params: PolicyParams, t: int):
    if not 0 <= t < params.T:
        raise ParameterError(f"stage {t} outside 0..{params.T - 1}")


def olfc_allocate(state: BeliefState, t: int, params: PolicyParams, sigma_sq: float,
                  h: EffortFunction = IDENTITY) -> AllocationPlan:
    """Generalized OLFC plan for one belief state."""
    _check_stage(params, t)
    channel = Channel(sigma_sq, loss=params.loss, h=h)
    beta = 1.0 if t == params.T - 1 else float(params.beta[t])
    if beta <= 0 or state.budget_remaining <= 0:
        return AllocationPlan(np.zeros(state.N), t, params.label, {"beta": beta})
    batch = Batch.from_state(state, 1)
    lam = olfc_allocation(batch, beta, float(params.gamma[t]), params.T - t, channel)[0]
    if t == params.T - 1:
        # spend the remainder exactly so rounding never strands effort
        lam *= state.budget_remaining / lam.sum()
    return AllocationPlan(lam, t, params.label, {"beta": beta, "gamma": float(params.gamma[t])})


def _anchored_quartic_min(betas, costs, exact_at_one: float):
    """Fit c(b) = c(1) + sum_k a_k (b - 1)^k, k = 1..4, and minimize on [0, 1]."""
    d = np.asarray(betas) - 1.0
    design = np.stack([d**k for k in range(1, 5)], axis=1)
    coef, *_ = np.linalg.lstsq(design, np.asarray(costs) - exact_at_one, rcond=None)
    fine = np.linspace(0.0, 1.0, 1001)
    fd = fine - 1.0
    fitted = exact_at_one + sum(coef[k] * fd ** (k + 1) for k in range(4))
    j = int(np.argmin(fitted))
    return float(fine[j]), coef


def _draw_futures(state: BeliefState, T: int, M: int, rng: np.random.Generator):
    base = Batch.from_state(state, M)
    theta = sample_posterior_truth(base, rng)
    return base, theta, [rng.standard_normal(theta.shape) for _ in range(T)]


def _future_costs(futures, t: int, params: PolicyParams, channel: Channel, fractions) -> np.ndarray:
    """(len(fractions), M) cost-to-go of spending each fraction now, then following ``params``."""
    base, theta, noises = futures
    fractions = np.asarray(fractions, dtype=float)
    G, M, T = fractions.size, base.M, params.T
    batch = Batch(np.tile(base.p, (G, 1)), np.tile(base.mu, (G, 1)), np.tile(base.s2, (G, 1)),
                  np.tile(base.budget, G))
    th = np.tile(theta, (G, 1))
    nz = [np.tile(n, (G, 1)) for n in noises]
    olfc_step(batch, th, nz[t], np.repeat(fractions, M), params.gamma[t], T - t, channel)
    run_schedule(batch, th, nz, params.beta, params.gamma, t + 1, channel)
    return terminal_cost(batch, channel).reshape(G, M)


def rollout_cost_curve(state: BeliefState, t: int, params: PolicyParams, sigma_sq: float, mc_budget: int,
                       rng: np.random.Generator, h: EffortFunction = IDENTITY, grid=ROLLOUT_GRID):
    """Monte Carlo cost-to-go for each candidate fraction on ``grid``.

    Futures are drawn from the current posterior and shared by every grid
    point.  The entry at fraction 1 is the exact single-stage cost.
    Returns ``(costs, stderr)``; the exact entry has zero error.
    """
    if int(mc_budget) <= 0:
        raise ParameterError("mc_budget must be positive")
    _check_stage(params, t)
    futures = _draw_futures(state, params.T, int(mc_budget), rng)
    return _curve(futures, state, t, params, Channel(sigma_sq, loss=params.loss, h=h), grid)


def _curve(futures, state, t, params, channel, grid):
    grid = np.asarray(grid, dtype=float)
    costs = np.empty(grid.size)
    errs = np.zeros(grid.size)
    sim = grid < 1.0
    if np.any(sim):
        per = _future_costs(futures, t, params, channel, grid[sim])
        M = per.shape[1]
        costs[sim] = per.mean(axis=1)
        errs[sim] = per.std(axis=1, ddof=1) / np.sqrt(M) if M > 1 else np.nan
    costs[~sim] = float(terminal_cost(Batch.from_state(state, 1), channel)[0])
    return costs, errs


def rollout_allocate(state: BeliefState, t: int, params: PolicyParams, sigma_sq: float, mc_budget: int,
                     rng: np.random.Generator, h: EffortFunction = IDENTITY) -> AllocationPlan:
    """One-step lookahead over the current fraction with the generalized policy as base.

    The minimizer of the anchored quartic fit competes with the base
    policy's own fraction on the same simulated futures and the cheaper of
    the two is used, so the lookahead never settles for a fraction the
    samples say is worse than the base choice.
    """
    if int(mc_budget) <= 0:
        raise ParameterError("mc_budget must be positive")
    _check_stage(params, t)
    if t == params.T - 1:
        plan = olfc_allocate(state, t, params, sigma_sq, h)
        plan.policy = params.label
        return plan
    channel = Channel(sigma_sq, loss=params.loss, h=h)
    futures = _draw_futures(state, params.T, int(mc_budget), rng)
    costs, errs = _curve(futures, state, t, params, channel, ROLLOUT_GRID)
    fit_beta, coef = _anchored_quartic_min(ROLLOUT_GRID[:-1], costs[:-1], costs[-1])
    base_beta = float(params.beta[t])
    pair, _ = _curve(futures, state, t, params, channel, [fit_beta, base_beta])
    beta = fit_beta if pair[0] <= pair[1] else base_beta
    lam = olfc_allocation(Batch.from_state(state, 1), beta, params.gamma[t], params.T - t, channel)[0]
    return AllocationPlan(lam, t, params.label, {"beta": beta, "fit_beta": fit_beta, "base_beta": base_beta,
                                                 "candidate_costs": pair, "costs": costs, "stderr": errs,
                                                 "fit": coef})
