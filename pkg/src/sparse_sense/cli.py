"""Command-line entry point: ``sparse-sense {calibrate,simulate,sweep,radar}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, radar
from .belief import PriorParams
from .calibration import DEFAULT_SNR_GRID, run_calibration
from .errors import SparseSenseError, ParameterError
from .losses import LossSpec

log = logging.getLogger("sparse_sense")

# settings used for the bundled tables; --full-scale switches to the finer search
CALIBRATION_DEFAULTS = {
    "p0": 0.01, "mu0": 1.0, "sigma0_sq": 1 / 16, "N": 1000, "Lambda0": None, "T_max": 10,
    "snr_db": tuple(DEFAULT_SNR_GRID), "samples": 1000, "loss": "mse", "fixed_gamma": False,
    "beta_step": 0.1, "gamma_step": 0.1, "refine_step": 0.02, "refine_span": 2, "degree": 6,
}
CALIBRATION_FULL = {"samples": 2000, "beta_step": 0.05, "gamma_step": 0.05, "refine_step": 0.01, "refine_span": 4}
_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}
_CAL_TYPES = {
    "p0": float, "mu0": float, "sigma0_sq": float, "N": int, "Lambda0": float, "T_max": int,
    "snr_db": harness._floats, "samples": int, "loss": str, "degree": int, "beta_step": float,
    "gamma_step": float, "refine_step": float, "refine_span": int,
    "fixed_gamma": lambda s: _BOOL[s.strip().lower()],
}


def parse_calibration_config(text: str, source: str = "<config>", full_scale: bool = False) -> dict:
    out = dict(CALIBRATION_DEFAULTS)
    if full_scale:
        out.update(CALIBRATION_FULL)
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ParameterError(f"{source}:{n}: expected key = value")
        if key not in _CAL_TYPES:
            raise ParameterError(f"{source}:{n}: unknown key {key!r}")
        try:
            out[key] = _CAL_TYPES[key](value)
        except (ValueError, KeyError) as exc:
            raise ParameterError(f"{source}:{n}: bad value for {key!r}: {value!r}") from exc
    return out


def cmd_calibrate(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_calibration_config(text, args.config or "<defaults>", args.full_scale)
    if args.threads and args.threads > 1:
        log.info("calibration runs serially; --threads is ignored")
    N = cfg["N"]
    prior = PriorParams(cfg["p0"], cfg["mu0"], cfg["sigma0_sq"], 1.0, cfg["Lambda0"] or float(N), N)
    out = Path(args.out or "calibration.calib")

    def progress(T, table):
        table.write(out)
        log.info("wrote T<=%d to %s", T, out)

    run_calibration(
        prior, cfg["T_max"], np.asarray(cfg["snr_db"]), samples=cfg["samples"], seed=args.seed,
        loss=LossSpec.parse(cfg["loss"]), fixed_gamma=cfg["fixed_gamma"], degree=cfg["degree"], progress=progress,
        beta_step=cfg["beta_step"], gamma_step=cfg["gamma_step"], refine_step=cfg["refine_step"],
        refine_span=cfg["refine_span"],
    )
    print(out)
    return 0


def _sim_config(args) -> harness.SimConfig:
    cfg = harness.load_config(args.config) if args.config else harness.SimConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.full_scale:
        cfg = harness.full_scale(cfg)
    return cfg


def _emit(results, out):
    text = harness.results_csv(results)
    if out:
        Path(out).write_text(text)
        print(out)
    else:
        sys.stdout.write(text)


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    _emit(harness.run_experiment(cfg, threads=args.threads), args.out or cfg.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _sim_config(args)
    changes = {}
    if args.snr:
        changes["snr_db"] = harness._floats(args.snr)
    if args.stages:
        changes["T_list"] = tuple(int(x) for x in harness._list(args.stages))
    if args.policies:
        changes["policies"] = harness._list(args.policies)
    cfg = replace(cfg, **changes)
    _emit(harness.run_experiment(cfg, threads=args.threads), args.out or cfg.out)
    return 0


def cmd_radar(args) -> int:
    if args.scene:
        scene = radar.read_pgm(args.scene)
    else:
        scene = radar.synthetic_scene(seed=args.seed)
    out_dir = Path(args.out_dir or args.out or "radar_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = 1 if args.policy == "nonadaptive" else args.stages
    cfg = radar.RadarConfig(args.pulses_per_pixel, stages, args.policy, nominal_snr_db=args.nominal_snr,
                            calibration=args.calibration)
    summary = radar.run_realizations(scene, cfg, args.realizations, seed=args.seed)
    tag = f"{args.policy}-T{stages}-P{args.pulses_per_pixel}"
    radar.write_pgm(scene, out_dir / "truth.pgm")
    radar.write_pgm(summary.first.reconstruction, out_dir / f"{tag}-single.pgm")
    radar.write_pgm(summary.mean, out_dir / f"{tag}-mean.pgm")

    row = args.scan_row if args.scan_row is not None else scene.height // 2
    if not 0 <= row < scene.height:
        raise ParameterError(f"scan row {row} outside the image")
    with open(out_dir / f"{tag}-profile.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "truth", "mean", "std"])
        for c in range(scene.width):
            w.writerow([c, harness._fmt(scene.pixels[row, c]), harness._fmt(summary.mean[row, c]),
                        harness._fmt(summary.std[row, c])])
    with open(out_dir / f"{tag}-summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "T", "pulses_per_pixel", "realizations", "target_var_db", "background_var_db", "mse"])
        w.writerow([args.policy, stages, args.pulses_per_pixel, summary.realizations,
                    harness._fmt(summary.target_std_db), harness._fmt(summary.background_std_db),
                    harness._fmt(summary.mse)])
    print(out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", help="output path")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--full-scale", action="store_true", help="N=10000 components, 4000 trials")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparse-sense", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="calibrate generalized OLFC parameters")
    c.set_defaults(func=cmd_calibrate)
    s = sub.add_parser("simulate", parents=[common], help="run the experiment described by a config")
    s.set_defaults(func=cmd_simulate)
    w = sub.add_parser("sweep", parents=[common], help="run a grid over SNR and stage counts")
    w.add_argument("--snr", help="SNR list in dB, e.g. '-10:30:5' or '10,20'")
    w.add_argument("--stages", help="comma-separated stage counts")
    w.add_argument("--policies", help="comma-separated policy kinds")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("radar", parents=[common], help="adaptive radar imaging demo")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--scene", help="binary PGM scene")
    g.add_argument("--synthetic", action="store_true", help="use the synthetic 13-target scene (default)")
    r.add_argument("--pulses-per-pixel", type=int, default=2)
    r.add_argument("--stages", type=int, default=5)
    r.add_argument("--policy", choices=["olfc", "ds", "nonadaptive"], default="olfc")
    r.add_argument("--realizations", type=int, default=100)
    r.add_argument("--out-dir")
    r.add_argument("--scan-row", type=int, default=None)
    r.add_argument("--nominal-snr", type=float, default=10.0, help="SNR (dB) used for the first-stage fraction")
    r.add_argument("--calibration", default="mse", help="shipped table name or .calib path")
    r.set_defaults(func=cmd_radar)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is None and args.command in ("calibrate", "radar"):
        args.seed = 0 if args.command == "radar" else 2024
    try:
        return args.func(args)
    except (SparseSenseError, OSError) as exc:
        print(f"sparse-sense: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
