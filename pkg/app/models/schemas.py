"""
Pydantic models for run configuration and result rows.

These schemas define the contract between the config file, the command-line
flags and the files a run leaves behind, ensuring every run can be recreated
from its own outputs.
"""
from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from xemb_ml.dataset_service import parse_variant_name
from xemb_ml.errors import ConfigError
from xemb_ml.schemas import EnvSettings, FGWSettings, LatentConfig, SweepSettings, TrainConfig

# Method name -> TrainConfig overrides.
METHODS: Dict[str, Dict[str, Any]] = {
    "bc": {"algorithm": "bc"},
    "bc+eg": {"algorithm": "bc", "grouping": "eg"},
    "td3bc": {"algorithm": "td3bc"},
    "td3bc+eg": {"algorithm": "td3bc", "grouping": "eg"},
    "iql": {"algorithm": "iql"},
    "iql+eg": {"algorithm": "iql", "grouping": "eg"},
    "iql+pcgrad": {"algorithm": "iql", "conflict_resolver": "pcgrad"},
    "iql+random": {"algorithm": "iql", "grouping": "random"},
    "iql+heuristic": {"algorithm": "iql", "grouping": "heuristic"},
    "iql+normalized": {"algorithm": "iql", "normalized_mode": True},
    "iql+eg-critic": {"algorithm": "iql", "grouping": "eg", "critic_grouping": True},
}

DEFAULT_DATASETS = [
    "expert-forward",
    "expert-backward",
    "replay-forward",
    "replay-backward",
    "mixture70-forward",
    "mixture70-backward",
]

ANALYSES = ("conflicts", "diversity", "embodiment", "transfer", "m-sweep", "budget", "finetune")


def _check_datasets(names: List[str]) -> List[str]:
    for name in names:
        try:
            parse_variant_name(name)
        except ConfigError as exc:
            raise ValueError(str(exc)) from exc
    return names


def _check_methods(names: List[str]) -> List[str]:
    unknown = [n for n in names if n not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; choose from {sorted(METHODS)}")
    return names


class RunSection(BaseModel):
    """[run] Experiment name, output directory, seeds and fan-out."""
    model_config = ConfigDict(extra="forbid")

    name: str = Field("default", description="Experiment name; output subdirectory")
    out: Optional[str] = Field(None, description="Output root (default XEMB_OUT/name)")
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1, description="Training seeds")
    workers: int = Field(1, ge=1, description="Parallel independent runs")

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, v: List[int]) -> List[int]:
        if len(set(v)) != len(v):
            raise ValueError("seeds must be unique")
        return v


class SuiteSection(BaseModel):
    """[suite] Suite generation seed, simulator constants and FGW solver knobs."""
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    env: EnvSettings = Field(default_factory=EnvSettings)
    fgw: FGWSettings = Field(default_factory=FGWSettings)


class DataSection(BaseModel):
    """[data] Dataset variants and budgets."""
    model_config = ConfigDict(extra="forbid")

    datasets: List[str] = Field(default_factory=lambda: list(DEFAULT_DATASETS))
    steps_per_robot: int = Field(20_000, ge=1)
    seed: int = 0
    sweep: SweepSettings = Field(default_factory=SweepSettings)

    @field_validator("datasets")
    @classmethod
    def _known_datasets(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("at least one dataset is required")
        return _check_datasets(v)


class TrainSection(TrainConfig):
    """[train] Shared hyperparameters plus the method and dataset matrix."""
    model_config = ConfigDict(extra="forbid")

    methods: List[str] = Field(default_factory=lambda: ["iql"])
    datasets: Optional[List[str]] = Field(None, description="Defaults to [data].datasets")
    auto_m: bool = Field(False, description="Use the clustering elbow instead of m for eg grouping")

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: List[str]) -> List[str]:
        return _check_methods(v)

    @field_validator("datasets")
    @classmethod
    def _known_datasets(cls, v: Optional[List[str]]) -> Optional[List[str]]:
        return v if v is None else _check_datasets(v)


class ModelSection(LatentConfig):
    """[model] Network widths."""
    model_config = ConfigDict(extra="forbid", frozen=True)


class AnalysisSection(BaseModel):
    """[analysis] Inputs of the analyze subcommand."""
    model_config = ConfigDict(extra="forbid")

    method: str = Field("iql", description="Method instrumented by conflict analyses")
    dataset: str = Field("mixture70-forward", description="Dataset of single-dataset analyses")
    cadence: int = Field(100, ge=1, description="Outer iterations between cosine matrices")
    conflict_datasets: List[str] = Field(
        default_factory=lambda: ["expert-forward", "mixture30-forward", "mixture70-forward"]
    )
    subsets: Optional[Dict[str, List[str]]] = Field(
        None, description="Named robot subsets; default 3 similar quadrupeds, all quadrupeds, all"
    )
    m_values: List[int] = Field(default_factory=lambda: [1, 2, 4, 7, 10, 13])
    budget_methods: List[str] = Field(default_factory=lambda: ["iql", "iql+eg", "iql+normalized"])
    held_out: Optional[List[str]] = Field(None, description="Fine-tune targets; default one per family")
    finetune_dataset: str = Field("expert-forward", description="Dataset of the pre-train / fine-tune analysis")
    transfer_threshold: float = Field(0.1, gt=0.0, description="Share of the expert score flagging transfer")

    @field_validator("method")
    @classmethod
    def _known_method(cls, v: str) -> str:
        return _check_methods([v])[0]

    @field_validator("budget_methods")
    @classmethod
    def _known_budget_methods(cls, v: List[str]) -> List[str]:
        return _check_methods(v)

    @field_validator("dataset", "finetune_dataset")
    @classmethod
    def _known_dataset(cls, v: str) -> str:
        return _check_datasets([v])[0]

    @field_validator("conflict_datasets")
    @classmethod
    def _known_conflict_datasets(cls, v: List[str]) -> List[str]:
        return _check_datasets(v)

    @field_validator("m_values")
    @classmethod
    def _positive_m(cls, v: List[int]) -> List[int]:
        if not v or min(v) < 1:
            raise ValueError("m_values must be positive")
        return v


class RunConfig(BaseModel):
    """Everything a run needs; serializes to and from TOML losslessly."""
    model_config = ConfigDict(extra="forbid")

    run: RunSection = Field(default_factory=RunSection)
    suite: SuiteSection = Field(default_factory=SuiteSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    model: ModelSection = Field(default_factory=ModelSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)

    @property
    def train_datasets(self) -> List[str]:
        return list(self.train.datasets or self.data.datasets)

    def method_config(self, method: str, seed: int, **overrides: Any) -> TrainConfig:
        """TrainConfig for one (method, seed) cell of the matrix.

        Raises:
            ConfigError: For unknown methods or contradictory overrides.
        """
        if method not in METHODS:
            raise ConfigError(f"unknown method '{method}'", field="method")
        base = self.train.model_dump(exclude={"methods", "datasets", "auto_m", "seed"})
        try:
            return TrainConfig(**{**base, **METHODS[method], **overrides, "seed": seed})
        except ValidationError as exc:
            raise ConfigError(str(exc), field=f"train ({method})") from exc


class RunResult(BaseModel):
    """One row of results.csv: a (dataset, method, seed) cell."""

    dataset: str
    method: str
    seed: int
    mean_return: float = Field(..., description="Mean final return over robots")
    mean_normalized: float = Field(..., description="Mean final return / expert reference")
    groups: int = Field(..., ge=0, description="Group count (0 when ungrouped)")
    updates: int
    actor_samples: int = Field(..., description="Actor samples processed over the run")


class RobotResult(BaseModel):
    """One row of robot_results.csv."""

    dataset: str
    method: str
    seed: int
    robot: str
    final_return: float
    normalized: float
    group: Optional[int] = None
