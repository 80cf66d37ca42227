"""Command line entry point: ``feddepth {run,grid,report,resume}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError, IngestionError
from .experiment import (
    CONFIG_ENV,
    SCENARIOS,
    emit_plot_data,
    load_config,
    load_ledgers,
    run_ablation_grid,
    run_experiment,
)

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _fraction(text):
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a fraction: {text!r}") from None
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("fraction must be in (0, 1]")
    return value


def _list(kind):
    def parse(text):
        try:
            return tuple(kind(v) for v in text.split(","))
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _add_run_flags(p, scenario=True):
    p.add_argument("--config", help=f"INI config file (default: ${CONFIG_ENV})")
    if scenario:
        p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--participants", type=int, help="number of participants C")
    p.add_argument("--fraction", type=_fraction, help="fraction F of participants per round, e.g. 1/3")
    p.add_argument("--local-epochs", type=int, help="local epochs E per round")
    p.add_argument("--rounds", type=int, help="number of rounds T")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddepth", description="Federated self-supervised depth experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run one scenario (ct, ft-iid, ft-niid)")
    _add_run_flags(run)

    grid = sub.add_parser("grid", help="run the C x F x E ablation grid")
    _add_run_flags(grid)
    grid.add_argument("--grid-participants", type=_list(int), default=(10, 9))
    grid.add_argument("--grid-fractions", type=_list(_fraction), default=(Fraction(1), Fraction(1, 2), Fraction(1, 3)))
    grid.add_argument("--grid-local-epochs", type=_list(int), default=(1, 2, 3))

    report = sub.add_parser("report", help="write plot CSVs from finished runs")
    report.add_argument("runs", nargs="+", help="run directories or ledger files")
    report.add_argument("--out", required=True, help="directory for the CSV files")

    resume = sub.add_parser("resume", help="continue an interrupted run from its last checkpoint")
    resume.add_argument("--out", required=True, help="output directory of the interrupted run")
    return parser


def _overrides(args) -> dict:
    return {
        "scenario": getattr(args, "scenario", None),
        "participants": args.participants,
        "fraction": args.fraction,
        "local_epochs": args.local_epochs,
        "rounds": args.rounds,
        "seed": args.seed,
        "out": args.out,
    }


def _summarise(records) -> dict:
    final = next((r for r in reversed(records) if r["type"] == "metrics"), {})
    cost = next((r for r in reversed(records) if r["type"] == "cost"), {})
    return {"metrics": final.get("metrics"), "w_max_gb": cost.get("w_max_gb"), "w_min_gb": cost.get("w_min_gb"),
            "steps": cost.get("steps_total")}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "run":
            records = run_experiment(load_config(args.config, _overrides(args)))
            print(json.dumps(_summarise(records), indent=1))
        elif args.verb == "grid":
            base = load_config(args.config, _overrides(args))
            _, summary = run_ablation_grid(base, args.grid_participants, args.grid_fractions, args.grid_local_epochs)
            for row in summary:
                print(json.dumps(row))
            if any(row["status"] != "ok" for row in summary):
                return EXIT_FAILURE
        elif args.verb == "report":
            paths = emit_plot_data(load_ledgers(args.runs), args.out)
            for name, path in paths.items():
                print(f"{name}: {path}")
        elif args.verb == "resume":
            cfg_path = Path(args.out) / "config.ini"
            if not cfg_path.exists():
                raise ConfigError(f"{cfg_path} not found; nothing to resume")
            records = run_experiment(load_config(cfg_path, {"out": args.out}), resume=True)
            print(json.dumps(_summarise(records), indent=1))
    except ConfigError as exc:
        print(f"feddepth: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IngestionError as exc:
        print(f"feddepth: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
