"""
train: run every (dataset, method, seed) cell and collate the results tables.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from ..core.config import EXIT_OK, override
from ..models.schemas import METHODS, RunConfig
from ..services.experiment_service import train_matrix


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("train", parents=[common], help="Train methods on datasets")
    parser.add_argument("--method", action="append", default=None, help=f"Repeatable; one of {sorted(METHODS)}")
    parser.add_argument("--dataset", action="append", default=None, help="Repeatable catalog name")
    parser.set_defaults(handler=run, seed_target="run")


def run(args: argparse.Namespace, config: RunConfig, root: Path) -> int:
    config = override(config, "train", methods=args.method, datasets=args.dataset)
    tables = train_matrix(config, root, config.run.workers)
    for name, path in tables.items():
        print(f"{name}: {path}")
    return EXIT_OK
