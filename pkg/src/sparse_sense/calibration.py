"""Offline calibration of the generalized OLFC first-stage parameters.

For each number of stages T and each SNR on a grid, the first-stage
fraction ``beta0`` and exponent ``gamma0`` are chosen to minimise the Monte
Carlo estimate of the expected final loss, with later stages taken from the
already calibrated shorter policies.  Raw estimates are then smoothed with
polynomials in SNR, and the smoothed fractions are forced to be
non-increasing in T.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .belief import PriorParams, snr_to_sigma_sq
from .engine import Batch, Channel, olfc_step, run_schedule, sample_prior_truth, terminal_cost
from .errors import DependencyError, ParameterError
from .losses import MSE, LossSpec
from .policies import PolicyParams, beta_to_alpha, gamma_schedule  # noqa: F401

log = logging.getLogger(__name__)

HEADER = "# sparse-sense-calib v1"
DEFAULT_SNR_GRID = np.arange(-10.0, 35.0 + 1e-9, 2.0)
SHIPPED = {
    "mse": "mse_p0.01.calib",
    "mse-fixed-gamma": "mse_p0.01_fixed_gamma.calib",
}


@dataclass
class CalibrationTable:
    """Raw and smoothed first-stage parameters on an (T, SNR) grid.

    Rows for T = 1 are implicit (``beta0 = 1``, ``gamma0 = 2/(q+2)``).
    ``meta`` carries the calibration settings as strings.
    """

    T: np.ndarray
    snr_db: np.ndarray
    beta0_raw: np.ndarray
    gamma0_raw: np.ndarray
    beta0_fit: np.ndarray
    gamma0_fit: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=int)
        for name in ("snr_db", "beta0_raw", "gamma0_raw", "beta0_fit", "gamma0_fit"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.T.size
        if any(getattr(self, a).shape != (n,) for a in ("snr_db", "beta0_raw", "gamma0_raw",
                                                        "beta0_fit", "gamma0_fit")):
            raise ParameterError("calibration columns must have equal length")

    @classmethod
    def empty(cls, meta=None) -> "CalibrationTable":
        return cls([], [], [], [], [], [], dict(meta or {}))

    @property
    def loss(self) -> LossSpec:
        return LossSpec.parse(self.meta.get("loss", "mse"))

    @property
    def gamma_final(self) -> float:
        return self.loss.gamma

    @property
    def fixed_gamma(self) -> bool:
        return self.meta.get("fixed_gamma", "0") in ("1", "true", "True")

    @property
    def stages(self) -> list[int]:
        return sorted(set(int(t) for t in self.T))

    @property
    def max_T(self) -> int:
        return max(self.stages, default=1)

    def rows(self, T: int):
        idx = np.nonzero(self.T == T)[0]
        return idx[np.argsort(self.snr_db[idx], kind="stable")]

    def snr_grid(self, T: int) -> np.ndarray:
        return self.snr_db[self.rows(T)]

    def _lookup(self, column: str, T: int, snr_db: float, fitted: bool = True) -> float:
        if T == 1:
            return 1.0 if column == "beta0" else self.gamma_final
        idx = self.rows(T)
        if idx.size == 0:
            raise DependencyError(f"no calibration rows for T={T}")
        values = getattr(self, f"{column}_{'fit' if fitted else 'raw'}")[idx]
        # linear interpolation, held constant beyond the grid ends
        return float(np.interp(snr_db, self.snr_db[idx], values))

    def beta0(self, T: int, snr_db: float, fitted: bool = True) -> float:
        return self._lookup("beta0", T, snr_db, fitted)

    def gamma0(self, T: int, snr_db: float, fitted: bool = True) -> float:
        return min(self._lookup("gamma0", T, snr_db, fitted), self.gamma_final)

    def policy_params(self, T: int, snr_db: float, kind: str = "olfc", fitted: bool = True,
                      mc_budget: int = 200) -> PolicyParams:
        """Full T-stage schedule at ``snr_db``."""
        if T > 1 and T > self.max_T:
            raise DependencyError(f"calibration covers T <= {self.max_T}, requested T={T}")
        loss = self.loss
        beta = np.array([self.beta0(T - t, snr_db, fitted) for t in range(T)])
        beta[-1] = 1.0
        g0 = self.gamma_final if (kind == "rollout" or self.fixed_gamma) else self.gamma0(T, snr_db, fitted)
        return PolicyParams(T, kind, beta, gamma_schedule(g0, loss.param, T), loss=loss, mc_budget=mc_budget)

    def add(self, T, snr, beta_raw, gamma_raw, beta_fit=np.nan, gamma_fit=np.nan):
        self.T = np.append(self.T, int(T))
        self.snr_db = np.append(self.snr_db, float(snr))
        self.beta0_raw = np.append(self.beta0_raw, float(beta_raw))
        self.gamma0_raw = np.append(self.gamma0_raw, float(gamma_raw))
        self.beta0_fit = np.append(self.beta0_fit, float(beta_fit))
        self.gamma0_fit = np.append(self.gamma0_fit, float(gamma_fit))

    def write(self, path) -> None:
        lines = [HEADER]
        for key in sorted(self.meta):
            lines.append(f"# {key}={self.meta[key]}")
        lines.append("# T snr_db beta0_raw gamma0_raw beta0_fit gamma0_fit")
        order = np.lexsort((self.snr_db, self.T))
        for i in order:
            lines.append(
                f"{self.T[i]:d} {self.snr_db[i]:.6g} {self.beta0_raw[i]:.10f} {self.gamma0_raw[i]:.10f} "
                f"{self.beta0_fit[i]:.10f} {self.gamma0_fit[i]:.10f}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "CalibrationTable":
        return cls.parse(Path(path).read_text(), str(path))

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "CalibrationTable":
        lines = text.splitlines()
        if not lines or lines[0].strip() != HEADER:
            raise ParameterError(f"{source}: missing header {HEADER!r}")
        meta = {}
        cols = [[] for _ in range(6)]
        for n, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParameterError(f"{source}:{n}: expected 6 columns, got {len(parts)}")
            try:
                cols[0].append(int(parts[0]))
                for j in range(1, 6):
                    cols[j].append(float(parts[j]))
            except ValueError as exc:
                raise ParameterError(f"{source}:{n}: {exc}") from exc
        return cls(*cols, meta=meta)


def load_shipped(name: str = "mse") -> CalibrationTable:
    """Load one of the calibration tables bundled with the package."""
    if name not in SHIPPED:
        raise ParameterError(f"unknown shipped calibration {name!r}; choose from {sorted(SHIPPED)}")
    text = resources.files("sparse_sense").joinpath("data").joinpath(SHIPPED[name]).read_text()
    return CalibrationTable.parse(text, SHIPPED[name])


@dataclass
class CalibrationDraws:
    """Signals and stage noise shared by every grid cell (common random numbers).

    The signal does not depend on the noise level, so one draw serves every
    SNR on the grid.
    """

    theta: np.ndarray
    noise: list

    @classmethod
    def sample(cls, prior: PriorParams, samples: int, max_T: int, rng: np.random.Generator):
        theta = sample_prior_truth(prior, samples, rng)
        noise = [rng.standard_normal(theta.shape) for _ in range(max(max_T - 1, 1))]
        return cls(theta, noise)


@dataclass
class CellResult:
    beta: float
    gamma: float
    cost: float
    stderr: float


def _cell_cost(after_first: Batch, draws, beta_sched, gamma_sched, channel):
    batch = after_first.copy()
    run_schedule(batch, draws.theta, draws.noise, beta_sched, gamma_sched, 1, channel)
    c = terminal_cost(batch, channel)
    return float(c.mean()), float(c.std(ddof=1) / math.sqrt(c.size)) if c.size > 1 else float("nan")


def _grid(lo, hi, step):
    n = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(n + 1), 12) if n >= 0 else np.array([])


def calibrate_point(T: int, prior: PriorParams, lower_beta, lower_gamma0: float, draws: CalibrationDraws,
                    loss: LossSpec = MSE, fixed_gamma: bool = False, beta_step: float = 0.05,
                    gamma_step: float = 0.05, refine_step: float = 0.01, refine_span: int = 4):
    """Grid search for the first-stage pair of the T-stage policy at one SNR.

    ``lower_beta[s - 1]`` is the first-stage fraction of the s-stage policy
    for s = 1..T-1 and ``lower_gamma0`` the first-stage exponent of the
    (T-1)-stage policy.  Returns ``(best, evaluated)`` where ``evaluated``
    lists every :class:`CellResult`; the candidate that skips the first
    stage and reproduces the (T-1)-stage policy is always included.
    """
    if T < 2:
        raise ParameterError("calibrate_point needs T >= 2")
    lower_beta = np.asarray(lower_beta, dtype=float)
    if lower_beta.size < T - 1:
        raise DependencyError(f"first-stage fractions for 1..{T - 1} stages are required")
    q = loss.param
    gf = loss.gamma
    channel = Channel(prior.sigma_sq, loss=loss)
    M = draws.theta.shape[0]
    tail = lower_beta[: T - 1][::-1].copy()  # beta for stages 1..T-1
    tail[-1] = 1.0

    def schedule(beta, gamma0):
        return np.concatenate(([beta], tail)), gamma_schedule(gamma0, q, T)

    first_cache: dict[float, Batch] = {}

    def after_first(beta):
        key = round(float(beta), 12)
        if key not in first_cache:
            b = Batch.from_prior(prior, M)
            # uniform prior: the first-stage allocation is uniform whatever gamma is
            olfc_step(b, draws.theta, draws.noise[0], beta, gf, T, channel)
            if len(first_cache) > 4:
                first_cache.clear()
            first_cache[key] = b
        return first_cache[key]

    evaluated: dict[tuple, CellResult] = {}

    def evaluate(beta, gamma0):
        key = (round(float(beta), 12), round(float(gamma0), 12))
        if key not in evaluated:
            bs, gs = schedule(beta, gamma0)
            cost, se = _cell_cost(after_first(beta), draws, bs, gs, channel)
            evaluated[key] = CellResult(float(beta), float(gamma0), cost, se)
        return evaluated[key]

    # gamma0 only acts through stages 1..T-2
    gamma_free = not fixed_gamma and T > 2
    betas = _grid(0.0, 1.0, beta_step)
    gammas = _grid(gamma_step, gf, gamma_step) if gamma_free else np.array([gf])
    if gamma_free and gammas[-1] < gf - 1e-12:
        gammas = np.append(gammas, gf)
    for b in betas:
        for g in gammas:
            evaluate(b, g)
    if gamma_free:
        # skipping the first stage with this exponent replays the (T-1)-stage policy exactly
        g_skip = ((T - 1) * lower_gamma0 - gf) / (T - 2)
        evaluate(0.0, g_skip)

    best = min(evaluated.values(), key=lambda c: (c.cost, c.beta, c.gamma))
    if refine_step and refine_step < beta_step:
        rb = best.beta + refine_step * np.arange(-refine_span, refine_span + 1)
        rb = rb[(rb >= 0) & (rb <= 1)]
        if gamma_free:
            rg = best.gamma + refine_step * np.arange(-refine_span, refine_span + 1)
            rg = rg[(rg > 0) & (rg <= gf + 1e-12)]
        else:
            rg = [best.gamma]
        for b in rb:
            for g in rg:
                evaluate(b, g)
        best = min(evaluated.values(), key=lambda c: (c.cost, c.beta, c.gamma))
    return best, list(evaluated.values())


def calibrate_stage_params(T: int, prior: PriorParams, snr_grid, table: CalibrationTable, draws: CalibrationDraws,
                           **search) -> list[CellResult]:
    """Raw first-stage pairs of the T-stage policy at every SNR of the grid.

    ``table`` must already hold smoothed values for 2..T-1 stages.  Results
    are appended to ``table`` as raw rows (the fitted columns stay NaN until
    :func:`fit_parameter_curves` runs).
    """
    loss = table.loss
    for s in range(2, T):
        if table.rows(s).size == 0 or np.any(np.isnan(table.beta0_fit[table.rows(s)])):
            raise DependencyError(f"smoothed calibration for T={s} is required before T={T}")
    out = []
    for snr in snr_grid:
        sigma_sq = snr_to_sigma_sq(snr, prior.mu0)
        pr = prior.with_(sigma_sq=sigma_sq)
        lower_beta = [table.beta0(s, snr) for s in range(1, T)]
        lower_gamma0 = table.gamma0(T - 1, snr)
        best, cells = calibrate_point(T, pr, lower_beta, lower_gamma0, draws, loss,
                                      fixed_gamma=table.fixed_gamma, **search)
        log.info("T=%d snr=%+.1f dB: beta0=%.3f gamma0=%.3f cost=%.6g (%d cells)", T, snr, best.beta, best.gamma,
                 best.cost, len(cells))
        table.add(T, snr, best.beta, best.gamma)
        out.append(best)
    return out


def _polyfit(x, y, degree):
    poly = np.polynomial.Polynomial.fit(x, y, degree)
    return poly(x), poly


def fit_parameter_curves(table: CalibrationTable, degree: int = 6) -> CalibrationTable:
    """Smooth the raw estimates with per-T polynomials in SNR.

    T is processed in increasing order; each smoothed fraction curve is
    clipped to lie on or below the curve for one stage fewer, then to
    [0, 1].  Exponent curves are clipped to [0, 2/(q+2)].  Returns a new table.
    """
    out = CalibrationTable(table.T.copy(), table.snr_db.copy(), table.beta0_raw.copy(), table.gamma0_raw.copy(),
                           np.full(table.T.size, np.nan), np.full(table.T.size, np.nan), dict(table.meta))
    gf = table.gamma_final
    prev = None
    for T in table.stages:
        idx = out.rows(T)
        x = out.snr_db[idx]
        if idx.size < degree + 1:
            raise ParameterError(f"T={T}: {idx.size} SNR points cannot support a degree-{degree} fit")
        bfit, _ = _polyfit(x, out.beta0_raw[idx], degree)
        gfit, _ = _polyfit(x, out.gamma0_raw[idx], degree)
        bfit = np.clip(bfit, 0.0, 1.0)
        if prev is not None:
            px, pb = prev
            bfit = np.minimum(bfit, np.interp(x, px, pb))
        out.beta0_fit[idx] = bfit
        out.gamma0_fit[idx] = np.clip(gfit, 0.0, gf)
        out.meta[f"rms_beta_T{T}"] = f"{np.sqrt(np.mean((bfit - out.beta0_raw[idx]) ** 2)):.4g}"
        prev = (x, bfit)
    out.meta["degree"] = str(degree)
    return out


def run_calibration(prior: PriorParams, T_max: int, snr_grid=DEFAULT_SNR_GRID, samples: int = 2000,
                    seed: int = 0, loss: LossSpec = MSE, fixed_gamma: bool = False, degree: int = 6,
                    progress=None, **search) -> CalibrationTable:
    """Calibrate T = 2..T_max in sequence, smoothing after each T."""
    if not loss.is_power:
        raise ParameterError("calibration is implemented for power losses")
    snr_grid = np.asarray(snr_grid, dtype=float)
    meta = {
        "loss": loss.name, "p0": f"{prior.p0:g}", "mu0": f"{prior.mu0:g}", "sigma0_sq": f"{prior.sigma0_sq:g}",
        "N": str(prior.N), "Lambda0": f"{prior.Lambda0:g}", "samples": str(samples), "seed": str(seed),
        "fixed_gamma": "1" if fixed_gamma else "0",
    }
    meta.update({k: str(v) for k, v in search.items()})
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCA11B]))
    draws = CalibrationDraws.sample(prior, samples, T_max, rng)
    table = CalibrationTable.empty(meta)
    for T in range(2, T_max + 1):
        calibrate_stage_params(T, prior, snr_grid, table, draws, **search)
        table = fit_parameter_curves(_only_through(table, T), degree)
        if progress is not None:
            progress(T, table)
    return table


def _only_through(table, T):
    keep = table.T <= T
    return CalibrationTable(table.T[keep], table.snr_db[keep], table.beta0_raw[keep], table.gamma0_raw[keep],
                            table.beta0_fit[keep], table.gamma0_fit[keep], dict(table.meta))
