"""``graphbid`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from graphbid.errors import GraphbidError
from graphbid.harness.config import load_config, toy_config, toy_config_text
from graphbid.harness.stages import STAGES, Run

ORDER = ["gen-data", "train-graph", "train-ldm", "align", "eval-forecast", "eval-kpi",
         "eval-bid-accuracy"]

HELP = {
    "gen-data": "simulate training and held-out episodes",
    "train-graph": "train the graph encoder and inverse dynamics",
    "train-ldm": "train the latent diffusion model, fine-tune jointly, distil the student",
    "align": "fit the KPI value head and run rejection-sampling fine-tuning",
    "eval-forecast": "held-out forecasting scores and the student retention ratio",
    "eval-kpi": "KPIs of the planner against the uniform-scaling baseline",
    "eval-bid-accuracy": "per-agent bid l2 error on held-out episodes",
    "pipeline": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphbid", description="Graph-embedded diffusion planning for multi-agent auctions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in ORDER + ["pipeline"]:
        cmd = sub.add_parser(name, help=HELP[name], description=HELP[name])
        cmd.add_argument("--config", default=None,
                         help="INI experiment config (default: the bundled toy config)")
        cmd.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
        cmd.add_argument("--out", required=True, help="run directory")
        cmd.add_argument("--force", action="store_true", help="recompute even if up to date")
    sub.add_parser("show-config", help="print the bundled toy config",
                   description="print the bundled toy config")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "show-config":
        sys.stdout.write(toy_config_text())
        return 0
    try:
        cfg = toy_config() if args.config is None else load_config(args.config)
        run = Run(cfg, args.seed, args.out, args.force)
        stages = ORDER if args.command == "pipeline" else [args.command]
        for name in stages:
            result = STAGES[name](run)
            status = "up to date" if result.skipped else "done"
            print(f"{name}: {status}")
            for path in result.outputs:
                print(f"  {path}")
            if result.metrics:
                print("  " + json.dumps(result.metrics, sort_keys=True))
    except GraphbidError as exc:
        print(f"graphbid: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"graphbid: I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
