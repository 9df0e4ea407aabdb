"""
Gradient-conflict and transfer instrumentation.

Responsibilities:
- Per-robot actor gradients through the trainer's own loss code path.
- Pairwise cosine matrices over time, negative-fraction curves, mean matrices
  and fixed-bin histograms.
- Transfer gain (cross-embodiment minus single-robot return) and Pearson
  correlations against gradient alignment and embodiment similarity.
- Conflict measurement during training, diversity sweeps over robot subsets.

Notes:
- Measurements draw measurement batches from their own generator, so a trainer's
  parameters and streams are untouched by instrumentation.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .dataset_service import Dataset, sample_batch
from .errors import DegenerateGradient, InsufficientData
from .linkchain_service import COMMANDS, expert_reference_scores
from .numerics_service import ParamVector, cosine, grad_of
from .offline_rl_service import (
    TensorBatch,
    TrainerState,
    actor_loss,
    prepare_actor_batch,
    run_training,
    to_tensors,
)
from .schemas import EmbodimentSpec, EnvSettings, FGWSettings, LatentConfig, TrainConfig
from .urma_service import ACTOR_HEAD_PREFIXES
from .utils.table_io import write_matrix_csv, write_rows_csv

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 50
DEFAULT_CADENCE = 100
TRANSFER_THRESHOLD = 0.1
_MEASURE_STREAM = 7


@dataclass(frozen=True)
class CosineRecord:
    """Pairwise gradient cosines at one training step; NaN rows mark degenerate robots."""

    step: int
    robots: Tuple[str, ...]
    matrix: np.ndarray


@dataclass(frozen=True)
class ConflictStats:
    steps: np.ndarray
    negative_fraction: np.ndarray
    mean_matrix: np.ndarray
    robots: Tuple[str, ...]
    bin_edges: np.ndarray
    histogram: np.ndarray

    @property
    def mean_negative_fraction(self) -> float:
        valid = self.negative_fraction[np.isfinite(self.negative_fraction)]
        return float(valid.mean()) if valid.size else float("nan")


@dataclass(frozen=True)
class TransferReport:
    robot: str
    single: float
    cross: float
    threshold: float

    @property
    def gain(self) -> float:
        return self.cross - self.single

    @property
    def flagged(self) -> bool:
        return abs(self.gain) > self.threshold


def per_robot_actor_grads(
    state: TrainerState,
    batch: TensorBatch,
    robots: Optional[Sequence[str]] = None,
    heads_only: Optional[bool] = None,
) -> Dict[str, ParamVector]:
    """Gradient of the configured actor loss on each robot's sub-batch alone.

    Args:
        state (TrainerState): Trainer whose policy is differentiated; unchanged.
        batch (TensorBatch): Global batch; IQL weights are computed on it first.
        robots (Optional[Sequence[str]]): Robots to report (default: all in batch).
        heads_only (Optional[bool]): Restrict to actor-head segments; defaults
            to config.heads_only_grads.

    Returns:
        Dict[str, ParamVector]: Gradient per robot, identical layouts.
    """
    robots = list(batch) if robots is None else list(robots)
    missing = [r for r in robots if r not in batch]
    if missing:
        raise KeyError(f"batch has no rows for {missing}")
    heads_only = state.config.heads_only_grads if heads_only is None else heads_only
    prepared = prepare_actor_batch(state, batch)
    grads = {}
    for robot in robots:
        grad = grad_of(actor_loss(state, {robot: prepared[robot]}), state.policy).grad
        grads[robot] = grad.select(ACTOR_HEAD_PREFIXES) if heads_only else grad
    return grads


def cosine_matrix(grads: Mapping[str, ParamVector], step: int = 0) -> CosineRecord:
    """Symmetric cosine matrix in sorted robot order with unit diagonal."""
    robots = tuple(sorted(grads))
    n = len(robots)
    matrix = np.full((n, n), np.nan)
    degenerate = set()
    for i, robot in enumerate(robots):
        if grads[robot].norm() < 1e-12:
            degenerate.add(robot)
            logger.warning("degenerate gradient for %s at step %d excluded", robot, step)
        else:
            matrix[i, i] = 1.0
    for i, k in itertools.combinations(range(n), 2):
        if robots[i] in degenerate or robots[k] in degenerate:
            continue
        try:
            value = cosine(grads[robots[i]], grads[robots[k]])
        except DegenerateGradient:
            continue
        matrix[i, k] = matrix[k, i] = value
    return CosineRecord(step=step, robots=robots, matrix=matrix)


def negative_fraction(matrix: np.ndarray) -> float:
    """Share of valid upper-triangle pairs with negative cosine (NaN without pairs)."""
    upper = matrix[np.triu_indices(matrix.shape[0], k=1)]
    upper = upper[np.isfinite(upper)]
    return float(np.mean(upper < 0.0)) if upper.size else float("nan")


def conflict_stats(records: Sequence[CosineRecord]) -> ConflictStats:
    """Negative fraction per step, mean matrix, and a 50-bin histogram on [-1, 1]."""
    if not records:
        raise InsufficientData("conflict_stats needs at least one record")
    robots = records[0].robots
    stack = np.stack([r.matrix for r in records])
    with np.errstate(invalid="ignore"):
        counts = np.sum(np.isfinite(stack), axis=0)
        mean = np.where(counts > 0, np.nansum(stack, axis=0) / np.maximum(counts, 1), np.nan)
    n = len(robots)
    off = [r.matrix[np.triu_indices(n, k=1)] for r in records]
    values = np.concatenate(off) if off else np.zeros(0)
    values = values[np.isfinite(values)]
    edges = np.linspace(-1.0, 1.0, HISTOGRAM_BINS + 1)
    counts_hist, _ = np.histogram(values, bins=edges)
    mass = counts_hist / counts_hist.sum() if counts_hist.sum() else counts_hist.astype(np.float64)
    return ConflictStats(
        steps=np.array([r.step for r in records]),
        negative_fraction=np.array([negative_fraction(r.matrix) for r in records]),
        mean_matrix=mean,
        robots=robots,
        bin_edges=edges,
        histogram=mass,
    )


def average_conflict(records: Sequence[CosineRecord]) -> Dict[str, float]:
    """Per-robot time-mean of the row-mean cosine excluding the diagonal."""
    robots = records[0].robots
    n = len(robots)
    rows = []
    for record in records:
        m = record.matrix.copy()
        np.fill_diagonal(m, np.nan)
        with np.errstate(invalid="ignore"):
            rows.append(np.nanmean(m, axis=1) if n > 1 else np.full(n, np.nan))
    with np.errstate(invalid="ignore"):
        means = np.nanmean(np.stack(rows), axis=0)
    return {robot: float(means[i]) for i, robot in enumerate(robots)}


def pearson(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Pearson r and two-sided p-value (t-distribution with n - 2 dof).

    Raises:
        InsufficientData: With fewer than three points.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    if x.size < 3:
        raise InsufficientData(f"pearson needs at least 3 points, got {x.size}")
    result = stats.pearsonr(x, y)
    return float(result[0]), float(result[1])


def transfer_reports(
    single: Mapping[str, float],
    cross: Mapping[str, float],
    expert_scores: Mapping[str, float],
    threshold_fraction: float = TRANSFER_THRESHOLD,
) -> List[TransferReport]:
    """Reports for robots present in both runs; flag threshold is a share of the expert score."""
    return [
        TransferReport(
            robot=robot,
            single=float(single[robot]),
            cross=float(cross[robot]),
            threshold=threshold_fraction * abs(float(expert_scores[robot])),
        )
        for robot in sorted(set(single) & set(cross))
    ]


def transfer_and_correlation(
    reports: Sequence[TransferReport],
    mean_cosines: Mapping[str, float],
) -> Tuple[float, float]:
    """Pearson correlation of transfer gain and mean cosine over flagged robots."""
    flagged = [r for r in reports if r.flagged and np.isfinite(mean_cosines.get(r.robot, np.nan))]
    return pearson([r.gain for r in flagged], [mean_cosines[r.robot] for r in flagged])


def alignment_rows(
    similarity: np.ndarray,
    similarity_labels: Sequence[str],
    stats_: ConflictStats,
) -> List[Dict[str, object]]:
    """One row per robot pair with a finite mean cosine: (pair, similarity, mean cosine)."""
    index = {label: i for i, label in enumerate(similarity_labels)}
    rows = []
    for i, k in itertools.combinations(range(len(stats_.robots)), 2):
        a, b = stats_.robots[i], stats_.robots[k]
        value = stats_.mean_matrix[i, k]
        if not np.isfinite(value):
            continue
        rows.append(
            {"robot_a": a, "robot_b": b, "similarity": float(similarity[index[a], index[b]]), "mean_cosine": float(value)}
        )
    return rows


def similarity_alignment(
    similarity: np.ndarray,
    similarity_labels: Sequence[str],
    stats_: ConflictStats,
) -> Tuple[List[Dict[str, object]], Tuple[float, float]]:
    """Scatter rows and the Pearson correlation of similarity and mean cosine over pairs."""
    rows = alignment_rows(similarity, similarity_labels, stats_)
    return rows, pearson([r["similarity"] for r in rows], [r["mean_cosine"] for r in rows])


def measure_conflicts(
    config: TrainConfig,
    suite: Sequence[EmbodimentSpec],
    dataset: Dataset,
    robots: Optional[Sequence[str]] = None,
    cadence: int = DEFAULT_CADENCE,
    latent: LatentConfig = LatentConfig(),
    env: EnvSettings = EnvSettings(),
    fgw: FGWSettings = FGWSettings(),
) -> List[CosineRecord]:
    """Train with the given config and record a cosine matrix every `cadence` iterations."""
    robots = sorted(robots or dataset.robots)
    measure_rng = np.random.default_rng([config.seed, _MEASURE_STREAM])
    records: List[CosineRecord] = []

    def measure(state: TrainerState) -> None:
        if state.step % cadence:
            return
        batch = to_tensors(sample_batch(dataset, robots, config.per_robot_batch, measure_rng))
        records.append(cosine_matrix(per_robot_actor_grads(state, batch), step=state.step))

    run_training(
        config, suite, dataset, robots=robots, latent=latent, env=env, fgw=fgw,
        eval_every=config.updates, on_iteration=measure,
    )
    return records


def diversity_sweep(
    config: TrainConfig,
    suite: Sequence[EmbodimentSpec],
    dataset: Dataset,
    subsets: Mapping[str, Sequence[str]],
    cadence: int = DEFAULT_CADENCE,
    latent: LatentConfig = LatentConfig(),
    env: EnvSettings = EnvSettings(),
) -> Dict[str, Optional[float]]:
    """Mean negative fraction per robot subset; None for subsets without pairs."""
    out: Dict[str, Optional[float]] = {}
    for name, robots in subsets.items():
        if len(set(robots)) < 2:
            out[name] = None
            continue
        records = measure_conflicts(config, suite, dataset, robots, cadence, latent, env)
        value = conflict_stats(records).mean_negative_fraction if records else float("nan")
        out[name] = None if not np.isfinite(value) else value
        logger.info("diversity subset %s (%d robots): negative fraction %s", name, len(robots), out[name])
    return out


def transfer_experiment(
    config: TrainConfig,
    suite: Sequence[EmbodimentSpec],
    dataset: Dataset,
    robots: Optional[Sequence[str]] = None,
    latent: LatentConfig = LatentConfig(),
    env: EnvSettings = EnvSettings(),
    expert_scores: Optional[Mapping[str, float]] = None,
    threshold_fraction: float = TRANSFER_THRESHOLD,
    fgw: FGWSettings = FGWSettings(),
) -> List[TransferReport]:
    """Single-robot versus cross-embodiment training of the same config.

    Single-robot runs drop any grouping or gradient combination, since both
    are undefined for one robot.
    """
    robots = sorted(robots or dataset.robots)
    cross = run_training(config, suite, dataset, robots=robots, latent=latent, env=env, fgw=fgw).final_returns()
    solo = config.model_copy(
        update={"grouping": "none", "conflict_resolver": "none", "critic_grouping": False, "normalized_mode": False}
    )
    single: Dict[str, float] = {}
    for robot in robots:
        single.update(run_training(solo, suite, dataset, robots=[robot], latent=latent, env=env).final_returns())
    if expert_scores is None:
        command = COMMANDS[dataset.manifest.direction]
        expert_scores = expert_reference_scores([s for s in suite if s.id in set(robots)], command, env)
    return transfer_reports(single, cross, expert_scores, threshold_fraction)


def export_conflicts(records: Sequence[CosineRecord], out_dir: Union[str, Path], prefix: str = "") -> Dict[str, Path]:
    """Write the cosine series, negative-fraction curve, histogram and mean matrix."""
    out_dir = Path(out_dir)
    summary = conflict_stats(records)
    series = [
        {"step": r.step, "i": r.robots[i], "j": r.robots[k], "value": r.matrix[i, k]}
        for r in records
        for i, k in itertools.combinations(range(len(r.robots)), 2)
    ]
    return {
        "series": write_rows_csv(out_dir / f"{prefix}cosine_series.csv", series, ("step", "i", "j", "value")),
        "negative_fraction": write_rows_csv(
            out_dir / f"{prefix}negative_fraction.csv",
            [{"step": int(s), "negative_fraction": v} for s, v in zip(summary.steps, summary.negative_fraction)],
        ),
        "histogram": write_rows_csv(
            out_dir / f"{prefix}histogram.csv",
            [
                {"lo": summary.bin_edges[b], "hi": summary.bin_edges[b + 1], "mass": summary.histogram[b]}
                for b in range(HISTOGRAM_BINS)
            ],
        ),
        "mean_cosine": write_matrix_csv(out_dir / f"{prefix}mean_cosine.csv", summary.mean_matrix, summary.robots),
    }


def export_transfer(reports: Sequence[TransferReport], path: Union[str, Path]) -> Path:
    rows = [
        {"robot": r.robot, "single": r.single, "cross": r.cross, "gain": r.gain, "flagged": r.flagged}
        for r in reports
    ]
    return write_rows_csv(path, rows, ("robot", "single", "cross", "gain", "flagged"))
