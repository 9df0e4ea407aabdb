"""
Error types raised by the xemb_ml services.

Every error derives from XembError so the front-end can map whole families to
exit codes. Errors carry their context (segment, robot, pair) as attributes.
"""
from __future__ import annotations

from typing import Optional, Tuple


class XembError(Exception):
    """Base class for all library errors."""


class NumericalError(XembError):
    """A loss, gradient or state became non-finite."""

    def __init__(self, message: str, segment: Optional[str] = None) -> None:
        super().__init__(message if segment is None else f"{message} (segment: {segment})")
        self.segment = segment


class LayoutError(XembError):
    """Two parameter vectors or optimizer states disagree on layout."""


class DegenerateGradient(XembError):
    """A gradient norm fell below the cosine threshold."""

    def __init__(self, message: str, robot: Optional[str] = None) -> None:
        super().__init__(message)
        self.robot = robot


class GraphError(XembError):
    """A morphology graph violates its structural contract."""


class SolverError(XembError):
    """The transport solver failed to converge."""

    def __init__(
        self,
        message: str,
        last_objective: float = float("nan"),
        pair: Optional[Tuple[str, str]] = None,
    ) -> None:
        super().__init__(message if pair is None else f"{message} (pair: {pair[0]}, {pair[1]})")
        self.last_objective = last_objective
        self.pair = pair


class NormalizationError(XembError):
    """A distance matrix cannot be min-max normalized."""


class ConfigError(XembError):
    """Invalid user configuration."""

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class GenerationError(XembError):
    """Dataset generation could not satisfy its contract for a robot."""

    def __init__(self, message: str, robot: Optional[str] = None) -> None:
        super().__init__(message if robot is None else f"{robot}: {message}")
        self.robot = robot


class CorruptDataset(XembError):
    """On-disk dataset failed validation."""

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        super().__init__(message if path is None else f"{message} ({path})")
        self.path = path


class ShapeError(XembError):
    """Network inputs have the wrong set sizes or lengths."""


class GroupingError(XembError):
    """A group produced an empty sub-batch."""


class InsufficientData(XembError):
    """Too few points for a statistic."""
