"""Command-line entry point: ``mg run`` and ``mg margins``.

Exit codes: 0 success, 1 configuration error, 2 simulation divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from .dynamics import SimulationDivergence
from .harness import margins_report, run_scenario
from .scenario import ScenarioError, load_scenario


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mg",
        description="Microgrid secondary-control simulation and analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write CSV + summary")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--controller",
                     choices=["proposed", "okid", "edmdc", "pi", "none"],
                     help="override the scenario's controller")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--t-end", type=float, dest="t_end",
                     help="override the simulated horizon [s]")

    margins = sub.add_parser("margins",
                             help="print the disc-margin report at a mid-run snapshot")
    margins.add_argument("--scenario", required=True)
    margins.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {}
    for key in ("controller", "seed", "t_end"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    try:
        spec = load_scenario(args.scenario, overrides)
    except ScenarioError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1

    if args.command == "run":
        try:
            metrics = run_scenario(spec, out_dir=args.out)
        except SimulationDivergence as exc:
            print(f"simulation diverged: {exc}", file=sys.stderr)
            return 2
        print(json.dumps(metrics.as_dict(), indent=2))
        return 0

    # margins
    try:
        report, _, _ = margins_report(spec)
    except SimulationDivergence as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
