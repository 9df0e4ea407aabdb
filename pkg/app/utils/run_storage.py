"""
Artifact location helpers.

Responsibility:
- Name every artifact path of an experiment in one place.
- Fail with a diagnostic naming the prerequisite command when an upstream
  artifact is missing.
"""
from pathlib import Path
from typing import Union

from xemb_ml.errors import XembError

SUITE_FILE = "suite.json"


class MissingArtifact(XembError):
    """An upstream artifact has not been produced yet."""

    def __init__(self, path: Path, command: str) -> None:
        super().__init__(f"missing {path}; run `{command}` first")
        self.path = path
        self.command = command


def suite_path(root: Path) -> Path:
    return root / SUITE_FILE


def dataset_path(root: Path, name: str) -> Path:
    return root / "data" / name


def distances_dir(root: Path) -> Path:
    return root / "morphology"


def train_path(root: Path, dataset: str, method: str, seed: int, *parts: Union[str, Path]) -> Path:
    """Construct a path under one training run directory.

    Args:
        root (Path): Experiment output root.
        dataset (str): Dataset name.
        method (str): Method name.
        seed (int): Training seed.
        parts (Union[str, Path]): Path components under the run dir.

    Returns:
        Path: Joined path inside the run directory.
    """
    base = root / "train" / dataset / method / f"seed-{seed}"
    return base.joinpath(*[str(p) for p in parts])


def analysis_path(root: Path, kind: str, *parts: Union[str, Path]) -> Path:
    return (root / "analysis" / kind).joinpath(*[str(p) for p in parts])


def require(path: Path, command: str) -> Path:
    """Return `path` if it exists.

    Raises:
        MissingArtifact: Naming the command that produces it.
    """
    if not path.exists():
        raise MissingArtifact(path, command)
    return path
