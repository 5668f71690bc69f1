"""Batch front end: simulate | hedge | sweep | report.

Each run is driven by one TOML config; the only command-line overrides are
--seed and --out, so an experiment is reproducible from the config artifact
alone.  Exit codes: 0 success, 2 config error, 3 numerical failure,
4 certificate failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .market import ApproximationKind, DegenerateModelError, check_structure
from .output import csv_text, fmt, hedge_csv_text, metadata_lines, solution_csv_text
from .paths import RngConfig, SimulationError, save_bundle, simulate
from .hedging import run_hedge
from .robustness import (
    EpsilonSweep,
    SweepError,
    bound_certificate,
    run_sweep,
    write_report,
    zeta_vanishing_check,
)
from .solver import PicardDivergenceError, RegressionError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CERTIFICATE = 4

NUMERICAL_ERRORS = (
    SimulationError,
    RegressionError,
    PicardDivergenceError,
    SweepError,
    DegenerateModelError,
)


def _meta(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.digest, "seed": cfg.seed}


def _sim_kinds(cfg: ExperimentConfig):
    kinds = [ApproximationKind.original()]
    if cfg.hedge_kind.tag != "Original":
        kinds.append(cfg.hedge_kind)
    return kinds


def _make_bundle(cfg: ExperimentConfig, kinds):
    return simulate(
        cfg.model, kinds, cfg.grid, cfg.n_paths, RngConfig(cfg.seed),
        epsilon_base=cfg.epsilon_base,
        max_exclusion_fraction=cfg.max_exclusion_fraction,
    )


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    kinds = _sim_kinds(cfg)
    bundle = _make_bundle(cfg, kinds)
    save_bundle(bundle, out / "bundle.bhb")
    w = bundle.weights
    rows = []
    for kind in kinds:
        terminal = bundle.prices[kind][:, -1]
        mean = float(w @ terminal)
        var = float(w @ (terminal - mean) ** 2)
        rows.append((kind.label(), fmt(mean), fmt(var), str(bundle.n_excluded)))
    text = csv_text(
        ("kind", "terminal_mean", "terminal_var", "n_excluded"),
        rows, metadata_lines("bsdehedge-simulate", **_meta(cfg)),
    )
    (out / "simulate_summary.csv").write_text(text, encoding="utf-8")
    print(f"wrote {out / 'bundle.bhb'} and {out / 'simulate_summary.csv'}")
    return EXIT_OK


def _structure_csv(cfg: ExperimentConfig, diag) -> str:
    rows = [
        ("kappa_min", fmt(np.min(diag.kappa))),
        ("kappa_max", fmt(np.max(diag.kappa))),
        ("h_sup", fmt(np.max(np.abs(diag.h)))),
        ("mvt_total", fmt(diag.K_sup)),
        ("mmm_margin", fmt(diag.mmm_margin)),
        ("lipschitz_C", fmt(diag.lipschitz_C)),
        ("warnings", "; ".join(diag.warnings)),
    ]
    return csv_text(("field", "value"), rows,
                    metadata_lines("bsdehedge-structure", **_meta(cfg)))


def cmd_hedge(cfg: ExperimentConfig, out: Path) -> int:
    diag = check_structure(cfg.model, cfg.hedge_kind,
                           sim_epsilon=cfg.epsilon_base
                           if cfg.hedge_kind.tag == "Original" else None)
    for warning in diag.warnings:
        print(f"structure warning: {warning}", file=sys.stderr)
    bundle = _make_bundle(cfg, [cfg.hedge_kind])
    result = run_hedge(bundle, cfg.hedge_kind, cfg.claim, cfg.solver)
    (out / "hedge.csv").write_text(hedge_csv_text(result, _meta(cfg)), encoding="utf-8")
    (out / "solution.csv").write_text(
        solution_csv_text(result.solution, _meta(cfg)), encoding="utf-8")
    (out / "structure.csv").write_text(_structure_csv(cfg, diag), encoding="utf-8")
    print(f"wrote {out / 'hedge.csv'}, {out / 'solution.csv'} and {out / 'structure.csv'}")
    return EXIT_OK


def _certificate_failures(report) -> list:
    failures = []
    for row in bound_certificate(report):
        if not row["ratio_ok"]:
            failures.append(f"{row['column']}: bound ratio {row['max_ratio']:.6g} > 1")
        elif not row["stable"]:
            failures.append(f"{row['column']}: fitted constants unstable under half-sample refit")
    zeta = zeta_vanishing_check(report)
    if not zeta["passed"]:
        failures.append("zeta_check: compensating Brownian integrand does not vanish")
    return failures


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.sweep_tag is None:
        raise ConfigError("config.sweep: section required by the sweep command")
    builder = {
        "TruncateAddB": ApproximationKind.truncate_add_b,
        "TruncateRescaleW": ApproximationKind.truncate_rescale_w,
        "TruncateOnly": ApproximationKind.truncate_only,
        "VarianceMatchedW": ApproximationKind.variance_matched_w,
    }.get(cfg.sweep_tag)
    if builder is None:
        raise ConfigError(f"config.sweep.tag: {cfg.sweep_tag!r} cannot be swept")
    sweep = EpsilonSweep(
        model=cfg.model, claim=cfg.claim,
        kinds=tuple(builder(e) for e in cfg.sweep_epsilons),
        grid=cfg.grid, n_paths=cfg.n_paths, rng=RngConfig(cfg.seed),
        solver=cfg.solver, epsilon_base=cfg.epsilon_base, mvh=cfg.sweep_mvh,
        max_exclusion_fraction=cfg.max_exclusion_fraction,
    )
    report = run_sweep(sweep)
    write_report(report, out / "robustness.csv", out / "robustness.jsonl")
    print(f"wrote {out / 'robustness.csv'} and {out / 'robustness.jsonl'}")
    failures = _certificate_failures(report)
    for failure in failures:
        print(f"certificate failure: {failure}", file=sys.stderr)
    return EXIT_CERTIFICATE if failures else EXIT_OK


def cmd_report(jsonl_path: str) -> int:
    path = Path(jsonl_path)
    if not path.is_file():
        raise ConfigError(f"report file not found: {path}")
    all_passed = None
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        record = json.loads(line)
        if record.get("record") == "fit":
            slope = record["slope_vs_claim_g2"]
            slope_txt = "n/a" if slope is None else f"{slope:.4f}"
            print(f"{record['column']:>13}: slope={slope_txt} C={record['c']:.6g} "
                  f"C'={'n/a' if record['c_prime'] is None else format(record['c_prime'], '.6g')} "
                  f"max_ratio={record['max_ratio']:.6g} "
                  f"ratio_ok={record['ratio_ok']} stable={record['stable']}")
        elif record.get("record") == "zeta_check":
            print(f"   zeta_check: passed={record['passed']} monotone={record['monotone']}")
        elif record.get("record") == "summary":
            all_passed = record["all_passed"]
            print(f"  all_passed: {all_passed}")
    if all_passed is None:
        raise ConfigError(f"{path}: no summary record found")
    return EXIT_OK if all_passed else EXIT_CERTIFICATE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsdehedge",
        description="Backward-SDE quadratic hedging laboratory",
    )
    parser.add_argument("--version", action="version", version=f"bsdehedge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "simulate coupled paths and dump the bundle"),
        ("hedge", "solve the backward equation and export the hedge"),
        ("sweep", "run an epsilon sweep and write the robustness report"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML experiment configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
    p = sub.add_parser("report", help="print certificates from a robustness JSON-lines file")
    p.add_argument("jsonl", help="path to robustness.jsonl")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.jsonl)
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "hedge":
            return cmd_hedge(cfg, out)
        return cmd_sweep(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
