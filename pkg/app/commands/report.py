"""
report: collate every CSV under the experiment root into report.md.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from ..core.config import EXIT_OK
from ..models.schemas import RunConfig
from ..services.report_service import write_report


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("report", parents=[common], help="Write the markdown summary")
    parser.set_defaults(handler=run, seed_target="run")


def run(args: argparse.Namespace, config: RunConfig, root: Path) -> int:
    # expected seeds come from the config only when one was given
    seeds = config.run.seeds if args.config is not None or args.seed is not None else None
    print(write_report(root, seeds))
    return EXIT_OK
