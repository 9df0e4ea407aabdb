"""
Run directory management.

Responsibility:
- Resolve the output root of an experiment and the directories of its parts.
- Stamp every output directory with the resolved config, version and seeds,
  so a run can be recreated from its own outputs.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, Optional

from ..models.schemas import RunConfig
from .config import BASE_OUT_DIR, RESOLVED_CONFIG_NAME, dump_run_config, version_string


def out_root(config: RunConfig) -> Path:
    """Experiment output root: [run].out, else XEMB_OUT/<name>.

    Args:
        config (RunConfig): Resolved run configuration.

    Returns:
        Path: The created directory.
    """
    d = Path(config.run.out) if config.run.out else BASE_OUT_DIR / config.run.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def seeds_used(config: RunConfig, extra: Optional[Iterable[int]] = None) -> Dict[str, object]:
    payload: Dict[str, object] = {
        "suite": config.suite.seed,
        "data": config.data.seed,
        "train": sorted(config.run.seeds),
    }
    if extra is not None:
        payload["train"] = sorted(set(extra))
    return payload


def stamp_run(d: Path, config: RunConfig, seeds: Optional[Iterable[int]] = None) -> Path:
    """Write config.resolved.toml, version.txt and seeds.json into `d`."""
    d.mkdir(parents=True, exist_ok=True)
    (d / RESOLVED_CONFIG_NAME).write_text(dump_run_config(config))
    (d / "version.txt").write_text(version_string() + "\n")
    (d / "seeds.json").write_text(json.dumps(seeds_used(config, seeds), indent=2, sort_keys=True) + "\n")
    return d

