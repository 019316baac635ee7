"""Batched simulation of many independent belief states.

A :class:`Batch` holds ``M`` belief states over the same ``N`` components as
(M, N) arrays.  Calibration, rollout and the experiment harness all drive
their Monte Carlo runs through the functions here.  Power losses with the
identity effort function go through the compiled kernels; anything else
falls back to the per-row allocator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .allocator import AllocationProblem, solve
from .belief import EPS_OBS, IDENTITY, BeliefState, EffortFunction, PriorParams, posterior_update
from .losses import MSE, LossSpec, _power_moment, g_kernel


@dataclass
class Batch:
    p: np.ndarray
    mu: np.ndarray
    s2: np.ndarray
    budget: np.ndarray

    @classmethod
    def from_prior(cls, prior: PriorParams, M: int) -> "Batch":
        shape = (int(M), prior.N)
        return cls(
            np.full(shape, prior.p0),
            np.full(shape, prior.mu0),
            np.full(shape, prior.sigma0_sq),
            np.full(shape[0], float(prior.Lambda0)),
        )

    @classmethod
    def from_state(cls, state: BeliefState, M: int) -> "Batch":
        tile = lambda v: np.tile(np.asarray(v, dtype=float), (int(M), 1))  # noqa: E731
        return cls(tile(state.p), tile(state.mu), tile(state.sigma_sq_i), np.full(int(M), state.budget_remaining))

    @property
    def M(self) -> int:
        return self.p.shape[0]

    @property
    def N(self) -> int:
        return self.p.shape[1]

    def copy(self) -> "Batch":
        return Batch(self.p.copy(), self.mu.copy(), self.s2.copy(), self.budget.copy())

    def row(self, m: int, t: int = 0) -> BeliefState:
        return BeliefState(self.p[m].copy(), self.mu[m].copy(), self.s2[m].copy(), float(self.budget[m]), t)


@dataclass(frozen=True)
class Channel:
    """Observation model as seen by the policy and by the generator.

    ``sigma_sq`` is the noise variance the policy assumes; ``true_sigma_sq``
    is what the generator uses (they differ only in mismatch runs).
    """

    sigma_sq: float
    true_sigma_sq: float | None = None
    loss: LossSpec = MSE
    h: EffortFunction = IDENTITY

    @property
    def noise_var(self) -> float:
        return self.sigma_sq if self.true_sigma_sq is None else self.true_sigma_sq

    @property
    def compiled(self) -> bool:
        return self.h.is_identity and self.loss.is_power


def _rows(x, M):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=float), (M,)))


def olfc_allocation(batch: Batch, beta, gamma: float | None, stages_remaining: int, channel: Channel):
    """``beta * lambda_bar`` for every row without touching the batch."""
    M, N = batch.p.shape
    beta = _rows(beta, M)
    lam = np.zeros((M, N))
    if channel.compiled:
        gamma = channel.loss.gamma if gamma is None else gamma
        with np.errstate(divide="ignore"):
            pg = np.power(batch.p, gamma)
            r = channel.sigma_sq / batch.s2
        spend = np.where(beta > 0, batch.budget, 0.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            flags = _kernels.waterfill_rows(pg, r, np.ascontiguousarray(spend), lam)
        lam *= beta[:, None]
        if flags.any():
            warnings.warn(f"{int(flags.sum())} state(s) used a uniform allocation", RuntimeWarning, stacklevel=2)
        return lam
    override = gamma if (gamma is not None and channel.h.is_identity and channel.loss.is_power) else None
    for m in range(M):
        if beta[m] <= 0 or batch.budget[m] <= 0:
            continue
        prob = AllocationProblem(batch.p[m], batch.s2[m], channel.sigma_sq, float(batch.budget[m]),
                                 stages_remaining, channel.loss, channel.h, override)
        lam[m] = beta[m] * solve(prob).lambda_bar
    return lam


def apply_allocation(batch: Batch, lam, theta, noise, channel: Channel):
    """Observe every component with effort above the threshold and update in place.

    ``noise`` holds standard normal draws; returns the observations with NaN
    where nothing was observed.  The spent effort is removed from ``budget``.
    """
    lam = np.ascontiguousarray(lam, dtype=float)
    hv = np.where(lam > EPS_OBS, channel.h(lam), 0.0)
    y = np.empty_like(lam)
    _kernels.observe_update(batch.p, batch.mu, batch.s2, np.ascontiguousarray(theta, dtype=float),
                            np.ascontiguousarray(noise, dtype=float), hv, channel.noise_var, channel.sigma_sq, y)
    batch.budget -= lam.sum(axis=1)
    np.maximum(batch.budget, 0.0, out=batch.budget)
    return y


def olfc_step(batch: Batch, theta, noise, beta, gamma: float | None, stages_remaining: int, channel: Channel,
              record: bool = False):
    """Allocate ``beta * lambda_bar``, observe and update every row in place.

    Returns ``(lam, y)`` when ``record`` is set, else ``None``.
    """
    M, N = batch.p.shape
    if channel.compiled:
        gamma = channel.loss.gamma if gamma is None else float(gamma)
        lam = np.empty((M, N))
        y = np.empty((M, N))
        nfb = _kernels.olfc_stage(batch.p, batch.mu, batch.s2, batch.budget, np.ascontiguousarray(theta),
                                  np.ascontiguousarray(noise), _rows(beta, M), gamma, channel.noise_var,
                                  channel.sigma_sq, lam, y)
        if nfb:
            warnings.warn(f"{nfb} state(s) used a uniform allocation", RuntimeWarning, stacklevel=2)
        return (lam, y) if record else None
    lam = olfc_allocation(batch, beta, gamma, stages_remaining, channel)
    y = apply_allocation(batch, lam, theta, noise, channel)
    return (lam, y) if record else None


def terminal_cost(batch: Batch, channel: Channel) -> np.ndarray:
    """Exact expected loss per row if the whole remaining budget is spent now.

    Equals ``sum_i p_i g(sigma_i^2, h(lam_i))`` with ``lam`` the optimal
    single-stage allocation; an exhausted budget gives ``sum_i p_i g(sigma_i^2, 0)``.
    """
    M = batch.M
    if channel.compiled:
        q = channel.loss.param
        out = np.empty(M)
        _kernels.power_terminal_cost(batch.p, batch.s2, batch.budget, channel.loss.gamma, 0.5 * q,
                                     channel.sigma_sq, out)
        return _power_moment(q) * out
    lam = olfc_allocation(batch, 1.0, None, 1, channel)
    hv = channel.h(lam)
    return np.sum(batch.p * g_kernel(channel.loss, batch.s2, hv, channel.sigma_sq), axis=1)


def run_schedule(batch: Batch, theta, noises, betas, gammas, t0: int, channel: Channel, t_stop: int | None = None):
    """Run generalized-OLFC stages ``t0 .. t_stop - 1`` in place.

    ``betas`` and ``gammas`` are full length-T schedules; ``noises[t]`` is the
    (M, N) standard-normal draw of stage t.  ``t_stop`` defaults to T - 1 so
    the final stage is left for :func:`terminal_cost`.
    """
    T = len(betas)
    t_stop = T - 1 if t_stop is None else t_stop
    for t in range(t0, t_stop):
        olfc_step(batch, theta, noises[t], betas[t], gammas[t], T - t, channel)
    return batch


def sample_posterior_truth(batch: Batch, rng: np.random.Generator):
    """Draw signals from the current posterior of every row."""
    active = rng.random(batch.p.shape) < batch.p
    amp = batch.mu + np.sqrt(batch.s2) * rng.standard_normal(batch.p.shape)
    return np.where(active, amp, 0.0)


def sample_prior_truth(prior: PriorParams, M: int, rng: np.random.Generator):
    active = rng.random((int(M), prior.N)) < prior.p0
    amp = prior.mu0 + np.sqrt(prior.sigma0_sq) * rng.standard_normal((int(M), prior.N))
    return np.where(active, amp, 0.0)


def single_update(state: BeliefState, lam, y, channel: Channel) -> BeliefState:
    """Reference single-state version of :func:`apply_allocation` (no kernel)."""
    lam = np.asarray(lam, dtype=float)
    hv = np.where(lam > EPS_OBS, channel.h(lam), 0.0)
    p, mu, s2 = posterior_update(state.p, state.mu, state.sigma_sq_i, np.nan_to_num(y), hv, channel.sigma_sq)
    return BeliefState(p, mu, s2, max(state.budget_remaining - float(lam.sum()), 0.0), state.t + 1)
