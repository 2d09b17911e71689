"""Command-line entry point: ``nsmix <subcommand> [--config FILE] [--seed S] [--out-dir DIR] [--threads T]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .checks import VerifySettings, verify_suite, write_report
from .dynamics import BlowUpError
from .experiments import (
    ExperimentConfig,
    bootstrap_rate_ci,
    fit_mixing_rate,
    run_couple,
    run_ensemble,
    run_mixing,
    run_recurrence,
    sha256_file,
    write_json,
)
from .spectral import set_fft_workers

EXIT_OK, EXIT_CHECK, EXIT_BLOWUP, EXIT_IO = 0, 2, 3, 4

VERIFY_GROUPS = {
    "verify-weights": ("weights",),
    "verify-operators": ("operators",),
    "verify-all": None,
}

log = logging.getLogger("nsmix")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsmix", description="Damped stochastic 2D Navier-Stokes: simulation, coupling and checks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "couple", "mixing", "recurrence", *VERIFY_GROUPS, "fit"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment configuration")
        sp.add_argument("--seed", type=int, help="override the noise seed")
        sp.add_argument("--out-dir", help="output directory (default: outputs.directory of the config)")
        sp.add_argument("--threads", type=int, help="FFT worker threads")
        if name == "fit":
            sp.add_argument("series", help="JSON file with keys t, D and optionally se")
    return p


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.noise.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _verify(cfg: ExperimentConfig, groups, out_dir) -> int:
    g = cfg.grid
    settings = VerifySettings(M=g.M, L=g.L, dealias_fraction=g.dealias_fraction, seed=cfg.noise.seed)
    report = verify_suite(settings) if groups is None else verify_suite(settings, groups)
    path = write_report(out_dir, report)
    manifest = {"config_hash": cfg.content_hash(), "files": {"verify_report.json": sha256_file(path)}, "kind": "verify"}
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    for r in report.results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.group}/{r.name}: value={r.value:.3e} tol={r.tolerance:.1e} {r.detail}")
    return EXIT_OK if report.passed else EXIT_CHECK


def _fit(path, out_dir) -> int:
    with open(path) as fh:
        data = json.load(fh)
    t = np.asarray(data["t"], dtype=float)
    D = np.asarray(data["D"], dtype=float)
    se = np.asarray(data["se"], dtype=float) if "se" in data else None
    fit = fit_mixing_rate(t, D, se)
    out = {"q_hat": fit.q_hat, "q_se": fit.q_se, "intercept": fit.intercept, "rate_exp": fit.rate_exp,
           "aic_power": fit.aic_power, "aic_exp": fit.aic_exp, "preferred": fit.preferred,
           "censored": (~fit.used).tolist()}
    if "replicates" in data:
        lo, hi, _ = bootstrap_rate_ci(t, np.asarray(data["replicates"], dtype=float), se=se)
        out["q_ci"] = [lo, hi]
    write_json(os.path.join(out_dir, "fit.json"), out)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
        out_dir = args.out_dir or cfg.outputs.directory
        os.makedirs(out_dir, exist_ok=True)
        set_fft_workers(cfg.threads)
        cmd = args.command
        if cmd in VERIFY_GROUPS:
            return _verify(cfg, VERIFY_GROUPS[cmd], out_dir)
        if cmd == "fit":
            return _fit(args.series, out_dir)
        runner = {"simulate": run_ensemble, "couple": run_couple, "mixing": run_mixing, "recurrence": run_recurrence}[cmd]
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(cfg.to_json() + "\n")
        out = runner(cfg, out_dir)
        if cmd == "simulate" and np.any(out["result"].blowup_step >= 0):
            log.warning("members blew up: %s", np.flatnonzero(out["result"].blowup_step >= 0).tolist())
        log.info("wrote %s", out_dir)
        return EXIT_OK
    except BlowUpError as exc:
        log.error("%s", exc)
        return EXIT_BLOWUP
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
