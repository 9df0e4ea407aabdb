"""
Top-level subcommand aggregator.

Responsibility:
- Mount every subcommand on the parser, sharing the common flags.
"""
from __future__ import annotations

import argparse

from . import analyze, gen_data, gen_suite, report, train

COMMANDS = (gen_suite, gen_data, train, analyze, report)


def register_commands(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    for command in COMMANDS:
        command.register(subparsers, common)
