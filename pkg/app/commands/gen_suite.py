"""
gen-suite: generate the embodiment suite and its expert reference scores.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from ..core.config import EXIT_OK
from ..models.schemas import RunConfig
from ..services.experiment_service import generate_suite
from ..utils.run_storage import suite_path


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("gen-suite", parents=[common], help="Generate the embodiment suite")
    parser.set_defaults(handler=run, seed_target="suite")


def run(args: argparse.Namespace, config: RunConfig, root: Path) -> int:
    """Write suite.json under the experiment root.

    Args:
        args (argparse.Namespace): Parsed flags.
        config (RunConfig): Resolved configuration.
        root (Path): Experiment output root.

    Returns:
        int: Exit code.
    """
    manifest = generate_suite(config, root)
    families = sorted({s.family for s in manifest.specs})
    counts = {f: sum(s.family == f for s in manifest.specs) for f in families}
    print(f"Suite of {len(manifest.specs)} embodiments {counts} written to {suite_path(root)}")
    return EXIT_OK
