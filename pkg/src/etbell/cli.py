"""Command-line interface.

Subcommands:
  run <config>        simulate a configured experiment into a run directory
  report <dir>        validate a run directory and print its summary
  lhv <strategy> <geometry> <n>   event-level strategy run (no timestamps)
  lock-demo <config>  run the stabilization loop and print the lock report
  oracle <name>       evaluate an independent oracle and check its expectation

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error,
3 oracle/acceptance-check failure.  The run-directory root defaults to
./runs and can be moved with the ETBELL_RUNS environment variable.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

from . import __version__, lhv, qmodel, tagger
from .config import (
    build_config,
    bundled_config_names,
    bundled_config_path,
    load_config,
)
from .errors import (
    ConfigurationError,
    ContractViolation,
    EstimationError,
    EtbellError,
)
from .lockbox import run_lock
from .runner import report, run_experiment
from .topology import Geometry

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3


def _resolve_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    stem = name[:-4] if name.endswith(".cfg") else name
    if f"{stem}.cfg" in bundled_config_names():
        return bundled_config_path(stem)
    raise ConfigurationError(
        f"config {name!r} not found on disk and not bundled "
        f"(bundled: {bundled_config_names()})"
    )


def _cmd_run(args: argparse.Namespace) -> int:
    cfg_path = _resolve_config(args.config)
    cfg = load_config(cfg_path)
    if args.seed is not None:
        sections = {k: dict(v) for k, v in cfg.raw.items()}
        sections["run"]["seed"] = args.seed
        cfg = build_config(sections)
    if args.out is not None:
        out = Path(args.out)
    else:
        root = Path(os.environ.get("ETBELL_RUNS", "runs"))
        out = root / f"{cfg_path.stem}-seed{cfg.seed}"
    run_dir = run_experiment(cfg, out, force=args.force)
    print(f"run written to {run_dir}")
    print((run_dir / "summary.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    print(report(args.run_dir))
    return EXIT_OK


def _cmd_lhv(args: argparse.Namespace) -> int:
    strategy = lhv.get_strategy(args.strategy, args.convention)
    geometry = Geometry(args.geometry)
    quad = qmodel.canonical_quad(args.convention)
    rep = lhv.run_lhv(geometry, strategy, quad, args.n_pairs, args.seed)
    print(f"strategy {rep.strategy!r} on {rep.geometry.value}, {rep.n_pairs} pairs, seed {rep.seed}")
    print(f"selection rate: {rep.selection_rate:.4f}")
    print(
        f"S post-selected = {rep.s_postselected.s_hat:.4f} "
        f"+/- {rep.s_postselected.std_err:.4f}"
    )
    print(f"S full sample   = {rep.s_full.s_hat:.4f} +/- {rep.s_full.std_err:.4f}")
    return EXIT_OK


def _cmd_lock_demo(args: argparse.Namespace) -> int:
    cfg = load_config(_resolve_config(args.config))
    result = run_lock(
        cfg.drift,
        cfg.reference,
        cfg.pid,
        cfg.lock_duration,
        seed=cfg.seed,
        setpoint=cfg.lock_setpoint,
    )
    r = result.report
    print(f"locked: {r.locked}")
    print(f"set point: {r.setpoint:+.4f} rad")
    print(f"residual rms: {r.residual_rms:.4f} rad")
    print(f"acquisition time: {r.lock_acquisition_time:.4f} s")
    print(f"actuator saturation: {r.saturation_fraction:.2%}")
    if r.diagnostic:
        print(f"diagnostic: {r.diagnostic}")
    if args.csv:
        import csv as _csv

        with open(args.csv, "w", newline="\n", encoding="utf-8") as fh:
            writer = _csv.writer(fh, lineterminator="\n")
            writer.writerow(["time_s", "phase_rad"])
            for t, phi in zip(result.time_s, result.residual):
                writer.writerow([repr(float(t)), repr(float(phi))])
        print(f"residual trace written to {args.csv}")
    return EXIT_OK


def _oracle_checks() -> dict[str, tuple]:
    """name -> (computed, expected, tolerance, description)"""
    quad = qmodel.canonical_quad()

    def tsirelson():
        return qmodel.chsh_value(quad, 1.0), 2.0 * math.sqrt(2.0), 1e-12

    def faking_correlation():
        worst = 0.0
        for pa, pb in quad.pairs():
            e = lhv.quadrature_faked_correlation(pa, pb, n_grid=400_000)
            worst = max(worst, abs(e - math.cos(pa - pb)))
        return worst, 0.0, 1e-6

    def selection_rate():
        return lhv.quadrature_selection_rate(n_grid=400_000), 2.0 / math.pi, 1e-6

    def hug_bound():
        return lhv.deterministic_bound_check(Geometry.HUG), 2.0, 1e-9

    def franson_bound():
        s = lhv.deterministic_bound_check(Geometry.FRANSON)
        # Setting-dependent selection beats the quantum bound; anything at
        # or above 2.8 demonstrates the loophole.
        return s, 4.0, 1.2

    def accidental():
        return tagger.accidental_rate(300_000.0, 9_000.0, 1e-9), 2.7, 1e-9

    return {
        "tsirelson": (tsirelson, "canonical-quad CHSH at unit visibility vs 2*sqrt(2)"),
        "faking-correlation": (
            faking_correlation,
            "max |quadrature faked correlation - cosine| over the canonical quad",
        ),
        "selection-rate": (selection_rate, "faking-strategy selection rate vs 2/pi"),
        "hug-bound": (hug_bound, "deterministic post-selected maximum, cross-linked geometry"),
        "franson-bound": (
            franson_bound,
            "deterministic post-selected maximum with setting-dependent paths",
        ),
        "accidental": (accidental, "closed-form accidental rate at the singles budget"),
    }


def _cmd_oracle(args: argparse.Namespace) -> int:
    checks = _oracle_checks()
    if args.name not in checks:
        raise ConfigurationError(f"unknown oracle {args.name!r}; available: {sorted(checks)}")
    fn, description = checks[args.name]
    computed, expected, tol = fn()
    ok = abs(computed - expected) <= tol
    status = "PASS" if ok else "FAIL"
    print(f"{args.name}: {description}")
    print(f"  computed {computed:.9g}, expected {expected:.9g} (tolerance {tol:g}): {status}")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etbell",
        description="Event-level simulator and analysis toolkit for energy-time Bell tests",
    )
    parser.add_argument("--version", action="version", version=f"etbell {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a configured experiment")
    p_run.add_argument("config", help="config path or bundled name (paper, loophole, ...)")
    p_run.add_argument("--out", help="run directory (default: $ETBELL_RUNS/<config>-seed<seed>)")
    p_run.add_argument("--seed", type=int, help="override the configured seed")
    p_run.add_argument("--force", action="store_true", help="overwrite an existing directory")
    p_run.set_defaults(func=_cmd_run)

    p_report = sub.add_parser("report", help="summarize an existing run directory")
    p_report.add_argument("run_dir")
    p_report.set_defaults(func=_cmd_report)

    p_lhv = sub.add_parser("lhv", help="event-level local-strategy run")
    p_lhv.add_argument("strategy", help="faking | coin | constant | random:<seed>")
    p_lhv.add_argument("geometry", choices=[g.value for g in Geometry])
    p_lhv.add_argument("n_pairs", type=int)
    p_lhv.add_argument("--seed", type=int, default=1)
    p_lhv.add_argument("--convention", default="difference", choices=["difference", "sum"])
    p_lhv.set_defaults(func=_cmd_lhv)

    p_lock = sub.add_parser("lock-demo", help="run the stabilization loop simulation")
    p_lock.add_argument("config")
    p_lock.add_argument("--csv", help="write the residual trace to this CSV file")
    p_lock.set_defaults(func=_cmd_lock_demo)

    p_oracle = sub.add_parser("oracle", help="run an independent verification oracle")
    p_oracle.add_argument(
        "name",
        help="tsirelson | faking-correlation | selection-rate | hug-bound | "
        "franson-bound | accidental",
    )
    p_oracle.set_defaults(func=_cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ContractViolation, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EtbellError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
