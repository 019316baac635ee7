"""Per-stage effort allocation.

The open-loop problem solved at every stage is

    minimise   sum_i p_i g(sigma_i^2, S h(lam_i / S))
    subject to lam >= 0, sum(lam) = Lambda,

with ``S`` the number of stages remaining.  For power losses and the
identity effort function the solution is a water-filling rule with an
explicit water level; otherwise it is found by projected gradient.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .belief import IDENTITY, EffortFunction
from .errors import ConvergenceError, ParameterError
from .losses import MSE, LossSpec, g_kernel, g_kernel_derivative

log = logging.getLogger(__name__)


@dataclass
class AllocationProblem:
    p: np.ndarray
    sigma_i_sq: np.ndarray
    sigma_sq: float
    Lambda: float
    stages_remaining: int = 1
    loss: LossSpec = MSE
    h: EffortFunction = IDENTITY
    gamma_override: float | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.sigma_i_sq = np.asarray(self.sigma_i_sq, dtype=float)
        if self.p.shape != self.sigma_i_sq.shape or self.p.ndim != 1:
            raise ParameterError("p and sigma_i_sq must be 1-D vectors of equal length")
        if not self.Lambda > 0:
            raise ParameterError(f"budget must be positive, got {self.Lambda}")
        if np.any(self.sigma_i_sq <= 0):
            raise ParameterError("posterior variances must be positive")
        if np.any((self.p < 0) | (self.p > 1)):
            raise ParameterError("probabilities must lie in [0, 1]")
        if int(self.stages_remaining) < 1:
            raise ParameterError("at least one stage must remain")
        if self.gamma_override is not None and not (0 < self.gamma_override < 1):
            raise ParameterError("gamma_override must lie in (0, 1)")

    @property
    def r(self) -> np.ndarray:
        return self.sigma_sq / self.sigma_i_sq

    @property
    def gamma(self) -> float:
        if self.gamma_override is not None:
            return float(self.gamma_override)
        return self.loss.gamma


@dataclass
class AllocationResult:
    lambda_bar: np.ndarray
    k: int
    C: float
    objective: float
    iterations: int = 0
    method: str = "waterfill"
    info: dict = field(default_factory=dict)


def accumulated_precision(problem: AllocationProblem, lam_bar):
    """``S h(lam / S)``: the best precision reachable by splitting over S stages."""
    S = int(problem.stages_remaining)
    return S * problem.h(np.asarray(lam_bar, dtype=float) / S)


def objective(problem: AllocationProblem, lam_bar) -> float:
    hbar = accumulated_precision(problem, lam_bar)
    return float(np.sum(problem.p * g_kernel(problem.loss, problem.sigma_i_sq, hbar, problem.sigma_sq)))


def gradient(problem: AllocationProblem, lam_bar) -> np.ndarray:
    S = int(problem.stages_remaining)
    lam_bar = np.asarray(lam_bar, dtype=float)
    hbar = accumulated_precision(problem, lam_bar)
    dg = g_kernel_derivative(problem.loss, problem.sigma_i_sq, hbar, problem.sigma_sq)
    return problem.p * dg * problem.h.derivative(lam_bar / S)


def _uniform_result(problem, reason):
    warnings.warn(f"{reason}; falling back to a uniform allocation", RuntimeWarning, stacklevel=3)
    n = problem.p.size
    lam = np.full(n, problem.Lambda / n)
    return AllocationResult(lam, n, float("nan"), objective(problem, lam), method="uniform-fallback")


def breakpoints(pg, r, order):
    """Budget thresholds b(0..N) at which the support grows by one component.

    ``order`` sorts ``pg / r`` in non-increasing order; ``b(N) = inf``.
    """
    pg_s = pg[order]
    r_s = r[order]
    n = pg.size
    cum_pg = np.concatenate(([0.0], np.cumsum(pg_s)))
    cum_r = np.concatenate(([0.0], np.cumsum(r_s)))
    b = np.full(n + 1, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = r_s / pg_s  # threshold of component k+1
        b[:n] = ratio * cum_pg[:n] - cum_r[:n]
    b[0] = 0.0
    b[:n][~np.isfinite(ratio)] = np.inf
    return b, cum_pg, cum_r


def waterfill_power_law(problem: AllocationProblem) -> AllocationResult:
    """Closed-form solution for a power loss and the identity effort function.

    Components are ranked by ``p_i**gamma * sigma_i^2`` (ties by index),
    the support size k is the one whose breakpoint interval contains the
    budget, and the allocation is ``C p_i**gamma - r_i`` on the support.
    """
    if not problem.h.is_identity:
        raise ParameterError("the closed form applies to the identity effort function only")
    if problem.gamma_override is None and not problem.loss.is_power:
        raise ParameterError("the closed form applies to power losses only")
    gamma = problem.gamma
    pg = np.power(problem.p, gamma)
    r = problem.r
    if not np.any(pg > 0):
        return _uniform_result(problem, "all support probabilities are zero")

    order = np.argsort(-(pg * problem.sigma_i_sq), kind="stable")
    b, cum_pg, cum_r = breakpoints(pg, r, order)
    # guard against rounding making b very slightly non-monotone
    b_mono = np.maximum.accumulate(b)
    k = int(np.searchsorted(b_mono[1:], problem.Lambda, side="left")) + 1
    k = min(k, int(np.count_nonzero(pg > 0)))
    C = (problem.Lambda + cum_r[k]) / cum_pg[k]

    lam = np.zeros_like(pg)
    top = order[:k]
    lam[top] = np.maximum(C * pg[top] - r[top], 0.0)
    return AllocationResult(lam, k, float(C), objective(problem, lam), info={"order": order, "b": b})


def waterfill_batch(p, sigma_i_sq, sigma_sq, budget, gamma):
    """Water-filling for a batch of states stored as (M, N) arrays.

    Uses the compiled active-set kernel; returns the (M, N) allocation.
    """
    p = np.ascontiguousarray(np.atleast_2d(p), dtype=float)
    s2 = np.ascontiguousarray(np.broadcast_to(sigma_i_sq, p.shape), dtype=float)
    with np.errstate(divide="ignore"):
        r = sigma_sq / s2
        pg = np.power(p, gamma)
    budget = np.ascontiguousarray(np.broadcast_to(np.asarray(budget, dtype=float), p.shape[:1]))
    out = np.empty_like(p)
    fallback = _kernels.waterfill_rows(pg, r, budget, out)
    if fallback.any():
        warnings.warn(
            f"{int(fallback.sum())} state(s) had no usable component; used a uniform allocation",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


def project_simplex(v, Lambda: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto {x >= 0, sum(x) = Lambda}."""
    if not Lambda > 0:
        raise ParameterError("Lambda must be positive")
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - Lambda
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def solve_general(
    problem: AllocationProblem,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    x0=None,
) -> AllocationResult:
    """Projected gradient for any loss with convex g and concave h.

    Barzilai-Borwein step lengths with Armijo backtracking (factor 1/2,
    sufficient-decrease constant 1e-4).  Converged when the next projected
    step is shorter than ``tol * max(1, Lambda)`` in the max-norm.
    """
    Lam = float(problem.Lambda)
    n = problem.p.size
    if not np.any(problem.p > 0):
        return _uniform_result(problem, "all support probabilities are zero")

    x = project_simplex(np.full(n, Lam / n) if x0 is None else np.asarray(x0, dtype=float), Lam)
    f = objective(problem, x)
    g = gradient(problem, x)
    gscale = np.max(np.abs(g))
    step = Lam / (n * gscale) if gscale > 0 else 1.0
    thresh = tol * max(1.0, Lam)
    best_x, best_f = x, f

    for it in range(1, max_iter + 1):
        # backtracking along the projection arc
        s = step
        while True:
            x_new = project_simplex(x - s * g, Lam)
            d = x_new - x
            f_new = objective(problem, x_new)
            if f_new <= f + 1e-4 * float(g @ d) or np.max(np.abs(d)) <= 1e-15 * max(1.0, Lam):
                break
            s *= 0.5
        g_new = gradient(problem, x_new)
        sk, yk = d, g_new - g
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f = x, f
        sy = float(sk @ yk)
        if sy > 0:
            long_step = float(sk @ sk) / sy
            # alternate the two Barzilai-Borwein step lengths
            step = long_step if it % 2 else sy / float(yk @ yk)
        else:
            long_step = step = s * 2.0
        # The objective is separable, so y_i / s_i estimates each component's
        # curvature; stepping by the inverse of the flattest one makes the
        # residual an estimate of the remaining allocation error.
        moved = np.abs(sk) > 1e-14 * max(1.0, Lam)
        res_step = long_step
        if np.any(moved):
            curv = yk[moved] / sk[moved]
            curv = curv[curv > 0]
            if curv.size:
                res_step = min(max(long_step, 1.0 / curv.min()), 1e3 * long_step)
        residual = np.max(np.abs(project_simplex(x - res_step * g, Lam) - x))
        if residual < thresh:
            k = int(np.count_nonzero(x > 0))
            return AllocationResult(x, k, float("nan"), f, iterations=it, method="projected-gradient",
                                    info={"residual": residual})
    raise ConvergenceError(
        f"projected gradient did not converge in {max_iter} iterations",
        best=AllocationResult(best_x, int(np.count_nonzero(best_x > 0)), float("nan"), best_f, max_iter,
                              "projected-gradient"),
        residual=residual,
    )


def solve(problem: AllocationProblem) -> AllocationResult:
    """Dispatch to the closed form when it applies, else projected gradient."""
    if problem.h.is_identity and (problem.loss.is_power or problem.gamma_override is not None):
        return waterfill_power_law(problem)
    return solve_general(problem)


def stage_split(lambda_bar_i: float, stages_remaining: int, h: EffortFunction = IDENTITY) -> float:
    """Per-stage share of ``lambda_bar_i`` that maximises total precision.

    Equal shares are optimal for every concave h (and one of many optima
    for the identity).
    """
    S = int(stages_remaining)
    if S < 1:
        raise ParameterError("stages_remaining must be >= 1")
    return float(lambda_bar_i) / S
