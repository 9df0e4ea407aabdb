"""
gen-data: generate offline dataset variants for the suite.

Responsibilities:
- Accept catalog names (--dataset mixture70-forward) or the parts of one
  (--variant mixture --direction forward --fraction 0.7).
- Validate the mixture fraction X in [0, 1] before any work.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from ..core.config import EXIT_OK, override
from ..models.schemas import RunConfig
from ..services.experiment_service import generate_datasets, variant_name


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("gen-data", parents=[common], help="Generate dataset variants")
    parser.add_argument("--dataset", action="append", default=None, help="Catalog name; repeatable")
    parser.add_argument("--variant", choices=("expert", "replay", "mixture"), default=None)
    parser.add_argument("--direction", choices=("forward", "backward"), default="forward")
    parser.add_argument("--fraction", type=float, default=None, help="Mixture early-phase fraction X in [0, 1]")
    parser.add_argument("--steps", type=int, default=None, help="Transitions per robot")
    parser.set_defaults(handler=run, seed_target="data")


def run(args: argparse.Namespace, config: RunConfig, root: Path) -> int:
    """Generate the requested variants (default: [data].datasets)."""
    names = list(args.dataset or [])
    if args.variant is not None:
        names.append(variant_name(args.variant, args.direction, args.fraction))
    config = override(config, "data", steps_per_robot=args.steps, datasets=names or None)
    for name, path in generate_datasets(config, root, config.data.datasets, config.run.workers).items():
        print(f"{name}: {path}")
    return EXIT_OK
