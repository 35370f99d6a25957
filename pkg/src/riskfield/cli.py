"""``riskfield simulate|fit|evaluate|map|sweep --config <path> --out <dir> [--jobs N] [--seed S]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigurationError, ParseError
from .pipeline import cmd_evaluate, cmd_fit, cmd_map, cmd_simulate, cmd_sweep

COMMANDS = ("simulate", "fit", "evaluate", "map", "sweep")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskfield", description="Disease-mapping simulation benchmark")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="scenario configuration (INI sections)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--jobs", type=int, default=None, help="parallel fit workers (default: RISKFIELD_JOBS or 1)")
    p.add_argument("--seed", type=int, default=None, help="override simulation.seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        if args.command == "simulate":
            m = cmd_simulate(cfg, args.out)
            print(f"simulated {len(m['scenarios'])} scenario(s) x {cfg.replicates} replicates -> {args.out}")
        elif args.command == "fit":
            recs = cmd_fit(cfg, args.out, args.jobs)
            bad = sum(r["status"] != "ok" for r in recs)
            print(f"fitted {len(recs) - bad}/{len(recs)} dataset-model pairs")
        elif args.command == "evaluate":
            reps = cmd_evaluate(cfg, args.out)
            print(f"evaluated {len(reps)} scenario-model pairs; summary at {args.out}/summary.csv")
        elif args.command == "map":
            files = cmd_map(cfg, args.out)
            print(f"wrote {len(files)} map files")
        else:
            reps = cmd_sweep(cfg, args.out, args.jobs)
            print(f"sweep done: {len(reps)} scenario-model pairs")
    except (ConfigurationError, ParseError) as exc:
        print(f"riskfield: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
