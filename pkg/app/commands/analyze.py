"""
analyze: conflict, diversity, embodiment, transfer, group-count, budget and
fine-tune analyses. Each writes CSV (canonical) and SVG previews under
analysis/<kind>/.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from ..core.config import EXIT_OK, override
from ..models.schemas import ANALYSES, RunConfig
from ..services.experiment_service import run_analysis


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("analyze", parents=[common], help="Run an analysis")
    parser.add_argument("kind", choices=ANALYSES)
    parser.add_argument("--dataset", default=None, help="Overrides [analysis].dataset")
    parser.add_argument("--method", default=None, help="Overrides [analysis].method")
    parser.set_defaults(handler=run, seed_target="run")


def run(args: argparse.Namespace, config: RunConfig, root: Path) -> int:
    config = override(config, "analysis", dataset=args.dataset, method=args.method)
    for name, path in run_analysis(args.kind, config, root, config.run.workers).items():
        print(f"{name}: {path}")
    return EXIT_OK
