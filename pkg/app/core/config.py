"""
Configuration helpers for the front-end.

Responsibility:
- Centralize environment variables and application constants.
- Configure logging once per process.
- Parse TOML run configuration into the pydantic RunConfig and write it back.
"""
from __future__ import annotations

import logging
import os
import subprocess
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional, Union

import tomli_w
from pydantic import ValidationError

from xemb_ml import __version__
from xemb_ml.errors import ConfigError

from ..models.schemas import RunConfig

APP_NAME = "xemb-lab"

# Base output directory for runs.
BASE_OUT_DIR = Path(os.environ.get("XEMB_OUT", "runs"))
LOG_LEVEL = os.environ.get("XEMB_LOG_LEVEL", "INFO").upper()
# Worker count used when --workers is not given (unset: [run].workers).
DEFAULT_WORKERS = int(os.environ["XEMB_WORKERS"]) if os.environ.get("XEMB_WORKERS") else None

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

RESOLVED_CONFIG_NAME = "config.resolved.toml"

_REPO_ROOT = Path(__file__).resolve().parents[2]


def configure_logging(level: Optional[str] = None) -> None:
    """Install one stream handler on the root logger.

    Args:
        level (Optional[str]): Level name; defaults to XEMB_LOG_LEVEL.
    """
    name = (level or LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"unknown log level '{name}'", field="log_level")
    logging.basicConfig(level=name, format=LOG_FORMAT, force=True)


def version_string() -> str:
    """git describe of the working tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=_REPO_ROOT,
            capture_output=True,
            text=True,
            check=True,
            timeout=10,
        )
        described = out.stdout.strip()
        if described:
            return described
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _validation_message(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid configuration\n  " + "\n  ".join(lines)


def parse_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping, converting pydantic failures to ConfigError."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_validation_message(exc)) from exc


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Read a TOML run configuration; no path means all defaults.

    Raises:
        ConfigError: On missing files, TOML syntax errors (with line and
            column) or schema violations (with field paths).
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", field="config")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}", field="config") from exc
    return parse_run_config(data)


def dump_run_config(config: RunConfig) -> str:
    """Serialize to TOML; unset optional fields are omitted and reload as None."""
    return tomli_w.dumps(config.model_dump(mode="json", exclude_none=True))


def override(config: RunConfig, section: str, **values: Any) -> RunConfig:
    """Copy of `config` with fields of one section replaced and revalidated."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return config
    data = config.model_dump(mode="json")
    data[section] = {**data[section], **values}
    return parse_run_config(data)


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    workers: Optional[int] = None,
    seed_target: str = "run",
) -> RunConfig:
    """Command-line flags take precedence over the file.

    Args:
        config (RunConfig): Configuration read from the file.
        seed (Optional[int]): Replaces the suite seed, the data seed, or the
            training seeds, depending on `seed_target`.
        out (Optional[str]): Output root.
        workers (Optional[int]): Parallel runs.
        seed_target (str): "suite", "data" or "run".

    Returns:
        RunConfig: The resolved configuration.
    """
    config = override(config, "run", out=out, workers=workers)
    if seed is None:
        return config
    if seed_target == "run":
        return override(config, "run", seeds=[seed])
    return override(config, seed_target, seed=seed)
