"""Bayesian belief state for the sparse signal model and its exact updates.

Each component ``i`` carries a posterior support probability ``p_i``, and,
conditioned on the component being active, a Gaussian amplitude posterior
with mean ``mu_i`` and variance ``sigma_sq_i``.  Observations of component
``i`` made with effort ``lam`` have noise variance ``sigma_sq / h(lam)``.

All functions here accept arrays of any leading shape, so a batch of ``M``
independent states can be stored as ``(M, N)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import BudgetViolationError, NoObservationError, ParameterError

#: Allocations at or below this are treated as "no observation taken".
EPS_OBS = 1e-12
#: Clamp range for updated probabilities (exact 0 and 1 are left alone).
P_MIN = 1e-30
P_MAX = 1.0 - 1e-15
#: Slack allowed when checking an allocation against the remaining budget.
BUDGET_RTOL = 1e-9


@dataclass(frozen=True)
class PriorParams:
    """Uniform prior shared by all components plus the noise level and budget."""

    p0: float
    mu0: float
    sigma0_sq: float
    sigma_sq: float
    Lambda0: float
    N: int

    def __post_init__(self):
        if not (0.0 <= self.p0 <= 1.0) or math.isnan(self.p0):
            raise ParameterError(f"p0 must lie in [0, 1], got {self.p0}")
        if not self.sigma0_sq >= 0.0:
            raise ParameterError(f"sigma0_sq must be >= 0, got {self.sigma0_sq}")
        if not self.sigma_sq > 0.0 or not math.isfinite(self.sigma_sq):
            raise ParameterError(f"sigma_sq must be > 0, got {self.sigma_sq}")
        if not self.Lambda0 > 0.0 or not math.isfinite(self.Lambda0):
            raise ParameterError(f"Lambda0 must be > 0, got {self.Lambda0}")
        if int(self.N) != self.N or self.N < 1:
            raise ParameterError(f"N must be a positive integer, got {self.N}")
        if not math.isfinite(self.mu0):
            raise ParameterError("mu0 must be finite")

    @property
    def snr_db(self) -> float:
        if self.mu0 == 0:
            return -math.inf
        return 10.0 * math.log10(self.mu0**2 / self.sigma_sq)

    def with_(self, **changes) -> "PriorParams":
        return replace(self, **changes)


def snr_to_sigma_sq(snr_db: float, mu0: float) -> float:
    """Noise variance giving ``snr_db = 10 log10(mu0^2 / sigma^2)``."""
    if mu0 == 0:
        raise ParameterError("SNR is undefined for a zero prior mean")
    return float(mu0) ** 2 * 10.0 ** (-float(snr_db) / 10.0)


@dataclass(frozen=True)
class EffortFunction:
    """Map from sensing effort to observation precision, normalised so h(1) = 1.

    ``kind`` is one of ``"identity"``, ``"power"`` (``h(lam) = lam**c`` with
    ``0 < c <= 1``) or ``"tabulated"``.  A tabulated function is piecewise
    linear through ``knots``/``values`` (first knot at zero) and extends past
    the last knot with the final slope.
    """

    kind: str = "identity"
    c: float = 1.0
    knots: tuple = field(default=(), compare=True)
    values: tuple = field(default=(), compare=True)

    def __post_init__(self):
        if self.kind == "identity":
            return
        if self.kind == "power":
            if not (0.0 < self.c <= 1.0):
                raise ParameterError(f"power effort exponent must be in (0, 1], got {self.c}")
            return
        if self.kind != "tabulated":
            raise ParameterError(f"unknown effort function kind {self.kind!r}")
        x = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.shape != v.shape or x.size < 2:
            raise ParameterError("tabulated effort needs matching knots/values, at least 2")
        if x[0] != 0.0 or v[0] != 0.0:
            raise ParameterError("tabulated effort must start at h(0) = 0")
        if np.any(np.diff(x) <= 0):
            raise ParameterError("effort knots must be strictly increasing")
        slopes = np.diff(v) / np.diff(x)
        if np.any(slopes < 0):
            raise ParameterError("effort function must be non-decreasing")
        if np.any(np.diff(slopes) > 1e-12 * max(1.0, slopes.max())):
            raise ParameterError("effort function must be concave")
        h1 = self._raw_tabulated(1.0)
        if not h1 > 0:
            raise ParameterError("tabulated effort must be positive at 1")
        # normalise so that h(1) = 1
        object.__setattr__(self, "values", tuple(v / h1))

    @classmethod
    def power(cls, c: float) -> "EffortFunction":
        return cls(kind="power", c=float(c))

    @classmethod
    def tabulated(cls, knots, values) -> "EffortFunction":
        return cls(kind="tabulated", knots=tuple(map(float, knots)), values=tuple(map(float, values)))

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity" or (self.kind == "power" and self.c == 1.0)

    def _raw_tabulated(self, lam):
        x = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        lam = np.asarray(lam, dtype=float)
        out = np.interp(lam, x, v)
        tail_slope = (v[-1] - v[-2]) / (x[-1] - x[-2])
        return np.where(lam > x[-1], v[-1] + tail_slope * (lam - x[-1]), out)

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.kind == "identity":
            return np.maximum(lam, 0.0)
        if self.kind == "power":
            return np.power(np.maximum(lam, 0.0), self.c)
        return self._raw_tabulated(np.maximum(lam, 0.0))

    def derivative(self, lam):
        """Right derivative of h; finite at zero by evaluating at ``EPS_OBS``."""
        lam = np.maximum(np.asarray(lam, dtype=float), 0.0)
        if self.kind == "identity":
            return np.ones_like(lam)
        if self.kind == "power":
            return self.c * np.power(np.maximum(lam, EPS_OBS), self.c - 1.0)
        x = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        slopes = np.diff(v) / np.diff(x)
        idx = np.clip(np.searchsorted(x, lam, side="right") - 1, 0, slopes.size - 1)
        return slopes[idx]

    def describe(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "power":
            return f"power:{self.c:g}"
        return "tabulated"


IDENTITY = EffortFunction()


@dataclass
class BeliefState:
    """Posterior state x(t) = (p, mu, sigma_sq_i, budget_remaining) at stage t."""

    p: np.ndarray
    mu: np.ndarray
    sigma_sq_i: np.ndarray
    budget_remaining: np.ndarray | float
    t: int = 0

    def copy(self) -> "BeliefState":
        return BeliefState(
            self.p.copy(),
            self.mu.copy(),
            self.sigma_sq_i.copy(),
            np.copy(self.budget_remaining),
            self.t,
        )

    @property
    def N(self) -> int:
        return self.p.shape[-1]

    def check(self, sigma0_sq: float | None = None) -> None:
        """Raise ``ParameterError`` if any invariant is broken."""
        if np.any((self.p < 0) | (self.p > 1)) or np.any(np.isnan(self.p)):
            raise ParameterError("probabilities outside [0, 1]")
        if np.any(self.sigma_sq_i < 0):
            raise ParameterError("negative posterior variance")
        if sigma0_sq is not None and np.any(self.sigma_sq_i > sigma0_sq * (1 + 1e-12)):
            raise ParameterError("posterior variance exceeds the prior variance")
        if np.any(np.asarray(self.budget_remaining) < 0):
            raise ParameterError("negative remaining budget")


def init_state(prior: PriorParams) -> BeliefState:
    """Initial state with every component at the prior values."""
    if not isinstance(prior, PriorParams):
        raise ParameterError("init_state expects PriorParams")
    n = int(prior.N)
    return BeliefState(
        p=np.full(n, float(prior.p0)),
        mu=np.full(n, float(prior.mu0)),
        sigma_sq_i=np.full(n, float(prior.sigma0_sq)),
        budget_remaining=float(prior.Lambda0),
        t=0,
    )


def _clamp_p(p_new, p_old):
    clamped = np.clip(p_new, P_MIN, P_MAX)
    # exact 0/1 priors are absorbing
    return np.where((p_old == 0.0) | (p_old == 1.0), p_old, clamped)


def posterior_update(p, mu, s2, y, hv, sigma_sq):
    """Exact one-observation posterior update, elementwise.

    ``hv`` is the precision gain h(lambda) of the observation; entries with
    ``hv <= 0`` are returned unchanged.  Returns new ``(p, mu, s2)``.
    """
    p = np.asarray(p, dtype=float)
    mu = np.asarray(mu, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    hv = np.asarray(hv, dtype=float)
    taken = hv > 0
    safe_h = np.where(taken, hv, 1.0)
    y = np.where(taken, y, 0.0)

    v0 = sigma_sq / safe_h
    v1 = s2 + v0
    # log(phi1/phi0), evaluated in the log domain
    llr = 0.5 * np.log(v0 / v1) - (y - mu) ** 2 / (2.0 * v1) + y**2 / (2.0 * v0)
    with np.errstate(divide="ignore"):
        logit_p = np.log(p) - np.log1p(-p)
    p_new = _clamp_p(expit(logit_p + llr), p)

    denom = sigma_sq + safe_h * s2
    mu_new = (sigma_sq * mu + safe_h * s2 * y) / denom
    s2_new = sigma_sq * s2 / denom
    return (
        np.where(taken, p_new, p),
        np.where(taken, mu_new, mu),
        np.where(taken, s2_new, s2),
    )


def update(
    state: BeliefState,
    allocation,
    observations,
    sigma_sq: float,
    h: EffortFunction = IDENTITY,
) -> BeliefState:
    """Return the posterior after observing with ``allocation``.

    ``observations`` must hold a finite value wherever the allocation exceeds
    ``EPS_OBS``; other entries are ignored and may be NaN.
    """
    lam = np.asarray(allocation, dtype=float)
    if lam.shape != state.p.shape:
        raise ParameterError(f"allocation shape {lam.shape} does not match state {state.p.shape}")
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise ParameterError("allocation must be non-negative")
    spent = lam.sum(axis=-1)
    budget = np.asarray(state.budget_remaining, dtype=float)
    if np.any(spent > budget * (1 + BUDGET_RTOL) + BUDGET_RTOL):
        raise BudgetViolationError(
            f"allocation spends {np.max(spent):.6g}, more than the remaining {np.min(budget):.6g}"
        )
    taken = lam > EPS_OBS
    y = np.asarray(observations, dtype=float)
    if y.shape != lam.shape:
        y = np.broadcast_to(y, lam.shape)
    if np.any(taken & ~np.isfinite(y)):
        raise NoObservationError("missing observation for a component that received effort")

    hv = np.where(taken, h(lam), 0.0)
    p, mu, s2 = posterior_update(state.p, state.mu, state.sigma_sq_i, y, hv, sigma_sq)
    return BeliefState(p, mu, s2, np.maximum(budget - spent, 0.0), state.t + 1)


def effective_precision(state: BeliefState, pending_effort, sigma_sq: float, h: EffortFunction = IDENTITY, i=None):
    """Accumulated precision in noise units, ``sigma_sq / sigma_sq_i + h(effort)``.

    After any sequence of updates this equals
    ``sigma_sq / sigma0_sq + sum_t h(lambda_i(t))``.
    """
    pending = np.asarray(pending_effort, dtype=float)
    if np.any(pending < 0):
        raise ParameterError("pending effort must be >= 0")
    s2 = state.sigma_sq_i if i is None else state.sigma_sq_i[..., i]
    with np.errstate(divide="ignore"):
        base = sigma_sq / s2
    return base + h(pending)


def predictive_sample(state: BeliefState, i: int, lam_i: float, sigma_sq: float, rng, h: EffortFunction = IDENTITY, size=None):
    """Draw measurements of component ``i`` from its predictive mixture.

    With probability ``p_i`` the draw is N(mu_i, sigma_sq_i + sigma_sq/h),
    otherwise N(0, sigma_sq/h).
    """
    if not lam_i > EPS_OBS:
        raise NoObservationError(f"effort {lam_i} is too small to take an observation")
    v0 = sigma_sq / float(h(lam_i))
    p_i = float(state.p[i])
    active = rng.random(size) < p_i
    z = rng.standard_normal(size)
    var = np.where(active, state.sigma_sq_i[i] + v0, v0)
    mean = np.where(active, state.mu[i], 0.0)
    return mean + np.sqrt(var) * z
