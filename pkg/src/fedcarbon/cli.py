"""``simulate`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .config import ExperimentPlan, parse_config, parse_sweep
from .errors import FedCarbonError
from .experiment import run_plan
from .sim import STRATEGIES, replace_config

TRACE_ENV = "FEDCARBON_TRACE"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Carbon-aware federated learning client-selection simulator.",
    )
    parser.add_argument("--config", required=True, help="flat key = value configuration file")
    parser.add_argument("--output", help="output directory (overrides output_dir)")
    parser.add_argument("--seeds", help="comma separated seeds, e.g. 0,1,2")
    parser.add_argument("--budget-sweep", help="budget fractions: start:stop:step or a comma list")
    parser.add_argument("--strategy", help=f"strategy or comma list of: {', '.join(STRATEGIES)}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def plan_from_args(args: argparse.Namespace) -> ExperimentPlan:
    plan = parse_config(args.config)
    changes: dict = {}
    if args.output:
        changes["output_dir"] = args.output
    if args.seeds:
        changes["seeds"] = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if args.budget_sweep:
        changes["budget_sweep"] = parse_sweep(args.budget_sweep)
    if args.strategy:
        changes["strategies"] = tuple(s.strip() for s in args.strategy.split(",") if s.strip())
    trace = os.environ.get(TRACE_ENV)
    if trace:
        changes["base_config"] = replace_config(plan.base_config, trace_path=trace)
    return replace(plan, **changes)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        plan = plan_from_args(args)
        summaries = run_plan(plan)
    except (FedCarbonError, ValueError) as exc:
        print(f"simulate: error: {exc}", file=sys.stderr)
        return 2
    print(f"{'strategy':<12} {'seed':>5} {'budget':>7} {'final_acc':>9} {'max_acc':>8} {'emissions_g':>14}")
    for s in summaries:
        budget = "-" if s.budget_fraction is None else f"{s.budget_fraction:g}"
        print(
            f"{s.strategy:<12} {s.seed:>5} {budget:>7} {s.final_accuracy:>9.4f} "
            f"{s.max_accuracy:>8.4f} {s.total_emissions_g:>14.1f}"
        )
    print(f"wrote {len(summaries)} metrics files and summary.json to {plan.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
