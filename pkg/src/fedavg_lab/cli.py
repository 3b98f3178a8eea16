"""Command-line entry point: ``fedavg-lab <probe|plan|run|verify|pipeline> --config PATH``.

Exit codes: 0 when every check passes or is vacuous, 1 when a check fails or
a run diverges, 2 on configuration, planning or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from fedavg_lab.config import load_config
from fedavg_lab.errors import DivergenceError, FedAvgLabError
from fedavg_lab.pipeline import EXIT_ERROR, EXIT_FAIL, Workspace, run_stage

STAGES = ("probe", "plan", "run", "verify", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedavg-lab", description="Probe, plan, run and verify FedAvg experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=None, help="output directory (overrides the config's 'output')")
        p.add_argument("--seed", type=int, default=None, help="run a single seed (run stage only)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None and (args.command != "run" or args.seed < 0):
            raise FedAvgLabError("--seed takes a nonnegative integer and applies to the run stage only")
        ws = Workspace(cfg, args.out)
        if args.command == "pipeline":
            for name in ("probe", "plan", "run", "verify"):
                code = run_stage(ws, name)
        else:
            code = run_stage(ws, args.command, args.seed)
        if args.command in ("verify", "pipeline"):
            verdict = json.loads(ws.path("verdict.json").read_text(encoding="utf-8"))
            print(" ".join(f"{k}={verdict[k]}" for k in ("envelope", "gd", "drift")))
        return code
    except DivergenceError as exc:
        print(f"fedavg-lab: diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (FedAvgLabError, OSError, ValueError) as exc:
        print(f"fedavg-lab: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
