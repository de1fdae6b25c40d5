"""Command-line entry point ``ep``.

    ep run <config> [--key value ...]
    ep compare --solvers fast,parallel <config> [--key value ...]
    ep check <output-dir>
    ep selftest

Every configuration key is also a flag (``--noise-var 1e-3`` or
``--noise_var 1e-3``); flags override the file.  Exit codes: 0 success,
2 configuration error, 3 solver failure, 4 divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGED = 0, 2, 3, 4


def _add_config_flags(parser):
    group = parser.add_argument_group("configuration overrides")
    for f in fields(ExperimentConfig):
        dashed = "--" + f.name.replace("_", "-")
        flags = [dashed] if "_" not in f.name else [dashed, "--" + f.name]
        group.add_argument(*flags, dest=f.name, default=None, metavar="VALUE")


def build_parser():
    parser = argparse.ArgumentParser(prog="ep", description="Expectation propagation experiments for sparse linear models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one solver and write its artifacts")
    p.add_argument("config", nargs="?", help="key=value configuration file")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="run several solvers on the same model")
    p.add_argument("config", nargs="?", help="key=value configuration file")
    p.add_argument("--solvers", default="fast,parallel", help="comma-separated solver names")
    p.add_argument("--rel", type=float, default=1e-4, help="relative distance for time-to-target")
    _add_config_flags(p)

    p = sub.add_parser("check", help="recompute the final energy of an output directory")
    p.add_argument("directory")

    p = sub.add_parser("selftest", help="run the oracle cross-checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args):
    return {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if getattr(args, f.name, None) is not None}


def _print_summary(summary: dict):
    for key, value in summary.items():
        print(f"{key}={value}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from ..gauss import FactorizationError
    from ..pls import MonotonicityError, PLSError, SiteProfileError
    from ..model import InvalidCavityError

    solver_errors = (FactorizationError, PLSError, SiteProfileError, MonotonicityError, InvalidCavityError, FloatingPointError, RuntimeError)
    try:
        if args.command == "run":
            from .run import run_experiment

            cfg = load_config(args.config, _overrides(args))
            run = run_experiment(cfg)
            _print_summary(run.summary)
            return EXIT_DIVERGED if run.summary.get("diverged") else EXIT_OK
        if args.command == "compare":
            from .run import EP_SOLVERS, run_comparison

            cfg = load_config(args.config, _overrides(args))
            names = [s.strip() for s in args.solvers.split(",") if s.strip()]
            unknown = [s for s in names if s not in EP_SOLVERS and s != "vb"]
            if unknown or not names:
                raise ConfigError(f"unknown solvers: {unknown or args.solvers!r}")
            report = run_comparison(cfg, names, args.rel)
            _print_summary(report)
            return EXIT_OK
        if args.command == "check":
            from .run import check_output

            ok, stored, phi = check_output(args.directory)
            print(f"stored={stored!r}\nrecomputed={phi!r}\nmatch={ok}")
            return EXIT_OK if ok else EXIT_SOLVER
        if args.command == "selftest":
            from .selftest import run_selftest

            return EXIT_OK if run_selftest(args.seed) else EXIT_SOLVER
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except solver_errors as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
