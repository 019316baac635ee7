"""Monte Carlo experiments: signal generation, policy runs and summaries.

Every trial draws its signal and noise from generators keyed by
``(seed, trial, role)``, so all policies, stage counts and SNR values see
the same underlying randomness and their losses can be compared pairwise.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .belief import EPS_OBS, IDENTITY, EffortFunction, PriorParams, init_state, snr_to_sigma_sq
from .calibration import CalibrationTable, load_shipped
from .engine import Batch, Channel, apply_allocation, olfc_step
from .errors import BudgetViolationError, ParameterError
from .losses import MSE, LossSpec, loss
from .policies import KINDS, PolicyParams, ds_allocate, ds_refine, oracle_allocate, rollout_allocate

log = logging.getLogger(__name__)

CSV_HEADER = ["policy", "T", "snr_db", "p0", "loss_kind", "mean_loss", "stderr", "gain_db", "trials"]
ROLE_SIGNAL, ROLE_NOISE, ROLE_POLICY = 0, 1, 2


def stream(seed: int, trial: int, role: int) -> np.random.Generator:
    """Counter-based generator for one (seed, trial, role) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial), int(role)])))


def generate_signal(prior: PriorParams, N: int | None = None, rng: np.random.Generator | None = None):
    """Indicators ``I ~ Bernoulli(p0)`` and amplitudes ``N(mu0, sigma0^2)`` on the support."""
    N = prior.N if N is None else int(N)
    rng = np.random.default_rng() if rng is None else rng
    active = rng.random(N) < prior.p0
    amp = prior.mu0 + math.sqrt(prior.sigma0_sq) * rng.standard_normal(N)
    return active, np.where(active, amp, 0.0)


def observe(amplitudes, allocation, h: EffortFunction, sigma_sq: float, rng: np.random.Generator):
    """``y = theta + n / sqrt(h(lambda))``; NaN where the effort is below threshold."""
    amplitudes = np.asarray(amplitudes, dtype=float)
    lam = np.asarray(allocation, dtype=float)
    if np.any(lam < 0):
        raise ParameterError("allocation must be non-negative")
    noise = rng.standard_normal(amplitudes.shape)
    taken = lam > EPS_OBS
    hv = np.where(taken, h(np.where(taken, lam, 1.0)), 1.0)
    return np.where(taken, amplitudes + noise * np.sqrt(sigma_sq / hv), np.nan)


@dataclass
class SimConfig:
    """Settings of one experiment.

    ``prior`` is the generator's prior; ``sigma_sq`` inside it is ignored
    because the SNR list sets the noise level.  The ``assumed_*`` fields
    describe what the policies believe (mismatch runs) and default to the
    truth.
    """

    prior: PriorParams = field(default_factory=lambda: PriorParams(0.01, 1.0, 1 / 16, 1.0, 1000.0, 1000))
    T_list: tuple = (2, 10)
    snr_db: tuple = (10.0,)
    policies: tuple = ("nonadaptive", "oracle", "ds", "olfc")
    trials: int = 500
    losses: tuple = (MSE,)
    seed: int = 0
    h: EffortFunction = IDENTITY
    out: str | None = None
    calibration: str = "mse"
    rollout_calibration: str = "mse-fixed-gamma"
    ds_ratio: float = 0.75
    ds_estimator: str = "ml"
    mc_budget: int = 200
    assumed_p0: float | None = None
    assumed_mu0: float | None = None
    assumed_sigma0_sq: float | None = None
    assumed_snr_offset_db: float = 0.0
    batch_size: int = 100

    def __post_init__(self):
        if int(self.trials) < 1:
            raise ParameterError("trials must be >= 1")
        if not len(self.snr_db):
            raise ParameterError("the SNR list must not be empty")
        for k in self.policies:
            if k not in KINDS:
                raise ParameterError(f"unknown policy {k!r}")
        if any(int(T) < 1 for T in self.T_list):
            raise ParameterError("stage counts must be >= 1")
        if self.ds_estimator not in ("ml", "posterior"):
            raise ParameterError("ds_estimator must be 'ml' or 'posterior'")
        self.losses = tuple(LossSpec.parse(x) if isinstance(x, str) else x for x in self.losses)

    def true_prior(self, snr_db: float) -> PriorParams:
        return self.prior.with_(sigma_sq=snr_to_sigma_sq(snr_db, self.prior.mu0))

    def assumed_prior(self, snr_db: float) -> PriorParams:
        mu0 = self.prior.mu0 if self.assumed_mu0 is None else self.assumed_mu0
        true = self.true_prior(snr_db)
        return true.with_(
            p0=self.prior.p0 if self.assumed_p0 is None else self.assumed_p0,
            mu0=mu0,
            sigma0_sq=self.prior.sigma0_sq if self.assumed_sigma0_sq is None else self.assumed_sigma0_sq,
            sigma_sq=true.sigma_sq * 10.0 ** (-self.assumed_snr_offset_db / 10.0),
        )

    def assumed_snr(self, snr_db: float) -> float:
        return self.assumed_prior(snr_db).snr_db

    def cells(self):
        """(policy, T) pairs in output order."""
        out = []
        for kind in self.policies:
            if kind in ("nonadaptive", "oracle"):
                out.append((kind, 1))
            else:
                out.extend((kind, int(T)) for T in self.T_list if not (kind == "ds" and T < 2))
        return out


@dataclass
class TrialMetrics:
    """Outcome of one trial of one policy."""

    losses: dict
    support_size: int
    stage_budget: np.ndarray
    seed: int
    trial: int


_TABLES: dict = {}


def _table(name: str) -> CalibrationTable:
    if name not in _TABLES:
        _TABLES[name] = load_shipped(name) if not Path(name).suffix else CalibrationTable.read(name)
    return _TABLES[name]


def policy_params(config: SimConfig, kind: str, T: int, snr_db: float) -> PolicyParams:
    snr = config.assumed_snr(snr_db)
    if kind in ("nonadaptive", "oracle"):
        return PolicyParams(1, kind)
    if kind == "ds":
        return PolicyParams(T, "ds", ds_ratio=config.ds_ratio)
    if T == 1:
        loss_ = _table(config.calibration).loss
        return PolicyParams(1, kind, loss=loss_, mc_budget=config.mc_budget)
    name = config.rollout_calibration if kind == "rollout" else config.calibration
    return _table(name).policy_params(T, snr, kind=kind, mc_budget=config.mc_budget)


def _draw(config: SimConfig, trials, T: int):
    N = config.prior.N
    theta = np.empty((len(trials), N))
    active = np.empty((len(trials), N), dtype=bool)
    noise = np.empty((T, len(trials), N))
    for j, tr in enumerate(trials):
        active[j], theta[j] = generate_signal(config.prior, N, stream(config.seed, tr, ROLE_SIGNAL))
        noise[:, j, :] = stream(config.seed, tr, ROLE_NOISE).standard_normal((T, N))
    return active, theta, noise


def _losses(config, est, theta, active):
    out = {}
    err = np.abs(est - theta)
    for spec in config.losses:
        out[spec.name] = np.sum(np.where(active, loss(spec, err), 0.0), axis=1)
    return out


def run_batch(config: SimConfig, kind: str, T: int, snr_db: float, trials) -> list[TrialMetrics]:
    """Run a block of trials of one policy at one SNR; deterministic per trial."""
    trials = list(trials)
    params = policy_params(config, kind, T, snr_db)
    true = config.true_prior(snr_db)
    assumed = config.assumed_prior(snr_db)
    channel = Channel(assumed.sigma_sq, true.sigma_sq, params.loss, config.h)
    active, theta, noise = _draw(config, trials, params.T)
    M, N = theta.shape
    batch = Batch.from_prior(assumed, M)
    used = np.zeros((M, params.T))

    if kind == "nonadaptive":
        lam = np.full((M, N), assumed.Lambda0 / N)
        apply_allocation(batch, lam, theta, noise[0], channel)
        used[:, 0] = lam.sum(axis=1)
        est = batch.mu
    elif kind == "oracle":
        lam = np.stack([oracle_allocate(a, 0, 1, assumed.Lambda0).lam for a in active]) if M else np.zeros((0, N))
        apply_allocation(batch, lam, theta, noise[0], channel)
        used[:, 0] = lam.sum(axis=1)
        est = batch.mu
    elif kind == "ds":
        working = np.ones((M, N), dtype=bool)
        wsum = np.zeros((M, N))
        wy = np.zeros((M, N))
        for t in range(params.T):
            lam = ds_allocate(working, t, params.T, assumed.Lambda0, params.ds_ratio).lam
            y = apply_allocation(batch, lam, theta, noise[t], channel)
            used[:, t] = lam.sum(axis=1)
            seen = lam > EPS_OBS
            hv = np.where(seen, config.h(np.where(seen, lam, 1.0)), 0.0)
            wsum += hv
            wy += np.where(seen, hv * np.nan_to_num(y), 0.0)
            if t < params.T - 1:
                working = ds_refine(working, y)
        if config.ds_estimator == "posterior":
            est = batch.mu
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                est = np.where(working & (wsum > 0), wy / wsum, 0.0)
    elif kind == "olfc":
        for t in range(params.T):
            final = t == params.T - 1
            lam, _ = olfc_step(batch, theta, noise[t], 1.0 if final else params.beta[t], params.gamma[t],
                               params.T - t, channel, record=True)
            used[:, t] = lam.sum(axis=1)
        est = batch.mu
    else:  # rollout
        for j, tr in enumerate(trials):
            rng = stream(config.seed, tr, ROLE_POLICY)
            row = Batch.from_state(init_state(assumed), 1)
            for t in range(params.T):
                state = row.row(0, t)
                plan = rollout_allocate(state, t, params, assumed.sigma_sq, params.mc_budget, rng, config.h)
                apply_allocation(row, plan.lam[None, :], theta[j:j + 1], noise[t, j:j + 1], channel)
                used[j, t] = plan.total
            batch.mu[j] = row.mu[0]
        est = batch.mu

    totals = used.sum(axis=1)
    over = totals > assumed.Lambda0 * (1 + 1e-9)
    if np.any(over):
        j = int(np.argmax(over))
        raise BudgetViolationError(
            f"{kind}-{params.T} trial {trials[j]} spent {totals[j]!r} of a budget of {assumed.Lambda0!r} "
            f"(per stage {used[j].tolist()})"
        )
    per_loss = _losses(config, est, theta, active)
    return [
        TrialMetrics({k: float(v[j]) for k, v in per_loss.items()}, int(active[j].sum()), used[j], config.seed, tr)
        for j, tr in enumerate(trials)
    ]


def run_trial(config: SimConfig, kind: str, T: int, snr_db: float, trial_index: int) -> TrialMetrics:
    return run_batch(config, kind, T, snr_db, [trial_index])[0]


def _task(args):
    config, kind, T, snr, lo, hi = args
    res = run_batch(config, kind, T, snr, range(lo, hi))
    return {name: np.array([m.losses[name] for m in res]) for name in res[0].losses}


@dataclass
class CellResult:
    policy: str
    T: int
    snr_db: float
    p0: float
    loss_kind: str
    mean_loss: float
    stderr: float
    gain_db: float
    trials: int
    per_trial: np.ndarray = field(repr=False, default=None)


def run_experiment(config: SimConfig, threads: int = 1) -> list[CellResult]:
    """Every (policy, T, SNR) cell, with gains over the non-adaptive baseline."""
    cells = config.cells()
    if ("nonadaptive", 1) not in cells:
        cells = [("nonadaptive", 1)] + cells
        emit_baseline = False
    else:
        emit_baseline = True
    n, bs = int(config.trials), max(1, int(config.batch_size))
    tasks = [
        (config, kind, T, float(snr), lo, min(lo + bs, n))
        for snr in config.snr_db for kind, T in cells for lo in range(0, n, bs)
    ]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=int(threads)) as pool:
            parts = list(pool.map(_task, tasks))
    else:
        parts = [_task(t) for t in tasks]

    merged: dict = {}
    for (cfg, kind, T, snr, lo, hi), part in zip(tasks, parts):
        key = (kind, T, snr)
        for name, arr in part.items():
            merged.setdefault(key, {}).setdefault(name, []).append(arr)
    out = []
    for snr in config.snr_db:
        snr = float(snr)
        base = {k: np.concatenate(v) for k, v in merged[("nonadaptive", 1, snr)].items()}
        for kind, T in cells:
            if kind == "nonadaptive" and not emit_baseline:
                continue
            for spec in config.losses:
                vals = np.concatenate(merged[(kind, T, snr)][spec.name])
                mean = float(vals.mean())
                se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
                bmean = float(base[spec.name].mean())
                gain = 10.0 * math.log10(bmean / mean) if mean > 0 and bmean > 0 else float("nan")
                out.append(CellResult(kind, T, snr, config.prior.p0, spec.name, mean, se, gain, vals.size, vals))
    return out


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def results_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow([r.policy, r.T, _fmt(r.snr_db), _fmt(r.p0), r.loss_kind, _fmt(r.mean_loss), _fmt(r.stderr),
                    _fmt(r.gain_db), r.trials])
    return buf.getvalue()


def write_csv(results: list[CellResult], path) -> None:
    Path(path).write_text(results_csv(results))


# ---------------------------------------------------------------------------
# key=value configuration files

def _floats(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            a, b, step = (float(x) for x in part.split(":"))
            n = int(math.floor((b - a) / step + 1e-9))
            out.extend(float(np.round(a + step * k, 10)) for k in range(n + 1))
        else:
            out.append(float(part))
    return tuple(out)


def _list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _effort(text):
    text = text.strip().lower()
    if text == "identity":
        return IDENTITY
    kind, _, val = text.partition(":")
    if kind == "power":
        return EffortFunction.power(float(val))
    raise ParameterError(f"unknown effort function {text!r}; use identity or power:c")


_PRIOR_KEYS = {"p0": float, "mu0": float, "sigma0_sq": float, "N": int, "Lambda0": float}
_KEYS = {
    "T": lambda s: tuple(int(x) for x in _list(s)),
    "snr_db": _floats,
    "policies": _list,
    "trials": int,
    "losses": _list,
    "seed": int,
    "h": _effort,
    "out": str,
    "calibration": str,
    "rollout_calibration": str,
    "ds_ratio": float,
    "ds_estimator": str,
    "mc_budget": int,
    "assumed_p0": float,
    "assumed_mu0": float,
    "assumed_sigma0_sq": float,
    "assumed_snr_offset_db": float,
    "batch_size": int,
}
_FIELD = {"T": "T_list"}


def parse_config(text: str, source: str = "<config>", base: SimConfig | None = None) -> SimConfig:
    """Parse flat ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    prior_kw, kw = {}, {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _PRIOR_KEYS:
                prior_kw[key] = _PRIOR_KEYS[key](value)
            elif key in _KEYS:
                kw[_FIELD.get(key, key)] = _KEYS[key](value)
            else:
                raise ParameterError(f"{source}:{n}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ParameterError):
                raise
            raise ParameterError(f"{source}:{n}: bad value for {key!r}: {value!r}") from exc
    base = base or SimConfig()
    prior = base.prior
    if prior_kw:
        if "N" in prior_kw and "Lambda0" not in prior_kw:
            prior_kw["Lambda0"] = float(prior_kw["N"])
        prior = prior.with_(**prior_kw)
    return replace(base, prior=prior, **kw)


def load_config(path, base: SimConfig | None = None) -> SimConfig:
    return parse_config(Path(path).read_text(), str(path), base)


def full_scale(config: SimConfig) -> SimConfig:
    """Scale an experiment up to N = 10000 components and 4000 trials."""
    ratio = config.prior.Lambda0 / config.prior.N
    return replace(config, prior=config.prior.with_(N=10000, Lambda0=ratio * 10000), trials=4000)
