"""
Command-line application entrypoint.

Responsibilities:
- Build and configure the argument parser (create_app).
- Resolve configuration from the TOML file, environment and flags.
- Dispatch to subcommands and map error families to exit codes.

Note: Subcommand implementations live in app/commands.

Usage (from repo root):
    python -m app.main gen-suite --config experiment.toml
    python -m app.main gen-data --variant mixture --fraction 0.7 --direction forward
    python -m app.main train --method iql --method iql+eg --workers 4
    python -m app.main analyze conflicts
    python -m app.main report
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from xemb_ml import __version__
from xemb_ml.errors import (
    ConfigError,
    CorruptDataset,
    DegenerateGradient,
    GenerationError,
    GraphError,
    GroupingError,
    InsufficientData,
    LayoutError,
    NormalizationError,
    NumericalError,
    ShapeError,
    SolverError,
    XembError,
)

from .commands.router import register_commands
from .core.config import (
    APP_NAME,
    DEFAULT_WORKERS,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERICAL,
    apply_overrides,
    configure_logging,
    load_run_config,
)
from .core.runs import out_root
from .utils.run_storage import MissingArtifact

logger = logging.getLogger(__name__)

# Error family -> exit code; checked in order, first match wins.
EXIT_CODES = (
    ((ConfigError, GraphError, GroupingError, ShapeError), EXIT_CONFIG),
    ((CorruptDataset, GenerationError, MissingArtifact, InsufficientData), EXIT_DATA),
    ((NumericalError, SolverError, DegenerateGradient, LayoutError, NormalizationError), EXIT_NUMERICAL),
)


def create_app() -> argparse.ArgumentParser:
    """Create and configure the argument parser.

    Returns:
        argparse.ArgumentParser: Parser with every subcommand registered.
    """
    parser = argparse.ArgumentParser(prog=APP_NAME, description="Cross-embodiment offline RL lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = _common_flags()
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_commands(subparsers, common)
    return parser


def _common_flags() -> argparse.ArgumentParser:
    """Flags accepted after every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML run configuration")
    common.add_argument("--seed", type=int, default=None, help="Seed override (suite, data or training seed)")
    common.add_argument("--out", default=None, help="Output root (default XEMB_OUT/<run name>)")
    common.add_argument("--workers", type=int, default=DEFAULT_WORKERS, help="Parallel independent runs")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default XEMB_LOG_LEVEL)")
    return common


def exit_code_for(exc: XembError) -> int:
    for families, code in EXIT_CODES:
        if isinstance(exc, families):
            return code
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse flags, run the subcommand, and return its exit code."""
    args = create_app().parse_args(argv)
    try:
        configure_logging(args.log_level)
        config = load_run_config(args.config)
        config = apply_overrides(config, args.seed, args.out, args.workers, args.seed_target)
        return args.handler(args, config, out_root(config))
    except XembError as exc:
        code = exit_code_for(exc)
        logger.error("%s: %s", type(exc).__name__, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
