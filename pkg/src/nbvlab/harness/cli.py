"""``nbvlab`` command line: gen-scenes, gen-labels, train, rollout, report."""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import NBVError
from . import pipeline
from .config import load_config

COMMANDS = {
    "gen-scenes": pipeline.cmd_gen_scenes,
    "gen-labels": pipeline.cmd_gen_labels,
    "train": pipeline.cmd_train,
    "rollout": pipeline.cmd_rollout,
    "report": pipeline.cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbvlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="YAML experiment config")
        p.add_argument("--workers", type=int, metavar="N", help="scene-level worker processes")
        p.add_argument("--profile", choices=["desk", "paper", "micro"])
        p.add_argument("--seed", type=int, metavar="U64", help="global seed")
        p.add_argument("--out", metavar="DIR", help="run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-labels":
            p.add_argument("--dump-grids", action="store_true", help="save pooled depth grids as PGM")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        config = load_config(
            args.config, workers=args.workers, profile=args.profile, seed=args.seed, output_dir=args.out,
        )
        extra = {"dump_grids": True} if getattr(args, "dump_grids", False) else {}
        result = COMMANDS[args.command](config, **extra)
    except NBVError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    if args.command == "report":
        print(result, end="")
    return 0
