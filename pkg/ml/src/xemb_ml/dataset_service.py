"""
Offline dataset generation, storage and batch sampling.

Responsibilities:
- Roll out the scripted controller to build the Expert, Expert Replay and
  X% suboptimal mixture variants for a suite, per direction.
- Store shards as a JSON manifest plus per-field little-endian float64 blobs
  with CRC32 checksums; load with full validation.
- Sample uniform with-replacement per-robot minibatches.

Notes:
- The non-expert variants come from a controller sweep standing in for a
  behavior-policy training run: gain eta ramps from 0.05 to 1.0 while the
  exploration noise falls from 0.8 to 0.05, then plateaus at the expert setting.
- Every episode draws from its own stream keyed by (seed, stream, robot, index),
  so episodes can be regenerated exactly and robots run in any order.
- Plateau episodes share the expert stream, so the X = 0 mixture holds the
  same episodes as the expert variant.
"""
from __future__ import annotations

import json
import logging
import math
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, CorruptDataset, GenerationError
from .linkchain_service import (
    COMMANDS,
    Episode,
    descriptors,
    expert_oracle,
    make_controller,
    rollout,
)
from .schemas import DatasetManifest, EmbodimentSpec, EnvSettings, RobotEntry, SweepSettings
from .utils.shard_io import read_blob, write_blob

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

TRANSITION_FIELDS = (
    "o_g",
    "o_j",
    "o_f",
    "next_o_g",
    "next_o_j",
    "next_o_f",
    "actions",
    "rewards",
    "dones",
)
EPISODE_FIELDS = ("episode_starts", "episode_phase", "episode_eta", "episode_return", "episode_reason")
STATIC_FIELDS = ("d_j", "d_f")
SHARD_FIELDS = TRANSITION_FIELDS + EPISODE_FIELDS + STATIC_FIELDS

DONE_REASON_CODES = {"none": 0, "limit": 1, "horizon": 2}

_EXPERT_STREAM = 0
_SWEEP_STREAM = 1
_VARIANT_NAME = re.compile(r"^(expert|replay|mixture(\d{1,3}))-(forward|backward)$")


@dataclass
class RobotShard:
    """All transitions of one robot in columnar form, plus per-episode tags."""

    robot_id: str
    o_g: np.ndarray
    o_j: np.ndarray
    o_f: np.ndarray
    next_o_g: np.ndarray
    next_o_j: np.ndarray
    next_o_f: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    episode_starts: np.ndarray
    episode_phase: np.ndarray
    episode_eta: np.ndarray
    episode_return: np.ndarray
    episode_reason: np.ndarray
    d_j: np.ndarray
    d_f: np.ndarray

    @property
    def n_transitions(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def n_episodes(self) -> int:
        return int(self.episode_starts.shape[0])

    @property
    def n_joints(self) -> int:
        return int(self.actions.shape[1])

    def episode_slices(self) -> List[slice]:
        starts = [int(s) for s in self.episode_starts] + [self.n_transitions]
        return [slice(a, b) for a, b in zip(starts[:-1], starts[1:])]

    def phase_share(self) -> float:
        """Fraction of transitions that belong to early-phase episodes."""
        lengths = np.diff(np.append(self.episode_starts, self.n_transitions))
        return float(np.sum(lengths * (self.episode_phase == 0)) / max(self.n_transitions, 1))


@dataclass
class Dataset:
    manifest: DatasetManifest
    shards: Dict[str, RobotShard] = field(default_factory=dict)

    @property
    def robots(self) -> List[str]:
        return sorted(self.shards)


@dataclass
class RobotBatch:
    """Per-robot sub-batch with the robot's descriptors attached."""

    robot_id: str
    o_g: np.ndarray
    o_j: np.ndarray
    o_f: np.ndarray
    next_o_g: np.ndarray
    next_o_j: np.ndarray
    next_o_f: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    d_j: np.ndarray
    d_f: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    def take(self, index: np.ndarray) -> "RobotBatch":
        return RobotBatch(
            robot_id=self.robot_id,
            d_j=self.d_j,
            d_f=self.d_f,
            **{name: getattr(self, name)[index] for name in TRANSITION_FIELDS},
        )


@dataclass
class Batch:
    """Minibatch keyed by robot; iteration order is the requested robot order."""

    per_robot: Dict[str, RobotBatch]

    @property
    def robots(self) -> List[str]:
        return list(self.per_robot)

    def __len__(self) -> int:
        return sum(len(b) for b in self.per_robot.values())

    def concat(self, name: str) -> np.ndarray:
        """Concatenated view of a field whose shape does not depend on J or F."""
        if name not in ("o_g", "next_o_g", "rewards", "dones"):
            raise ValueError(f"{name} varies in size across robots and has no concatenated view")
        return np.concatenate([getattr(b, name) for b in self.per_robot.values()])

    def subset(self, robots: Sequence[str]) -> "Batch":
        return Batch({robot: self.per_robot[robot] for robot in robots})


def episode_rng(seed: int, stream: int, robot_id: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, zlib.crc32(robot_id.encode("utf-8")), index])


def sweep_schedule(n_episodes: int, sweep: SweepSettings = SweepSettings()) -> Tuple[np.ndarray, np.ndarray]:
    """Gain and noise per sweep episode.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (eta, sigma), each of length n_episodes.
    """
    progress = np.arange(n_episodes, dtype=np.float64) / max(n_episodes - 1, 1)
    ramp = np.minimum(1.0, progress / sweep.ramp_fraction) ** sweep.ramp_exponent
    eta = sweep.eta_start + (sweep.eta_end - sweep.eta_start) * ramp
    frac = (eta - sweep.eta_start) / (sweep.eta_end - sweep.eta_start)
    sigma = sweep.sigma_start + (sweep.sigma_end - sweep.sigma_start) * frac
    plateau = ramp >= 1.0
    eta[plateau] = sweep.eta_end
    sigma[plateau] = sweep.sigma_end
    return eta, sigma


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over up to `window` most recent entries."""
    cumsum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.shape[0] + 1)
    lo = np.maximum(0, idx - window)
    return (cumsum[idx] - cumsum[lo]) / (idx - lo)


def replay_truncation_index(returns: np.ndarray, window: int, threshold: float) -> int:
    """First episode whose moving-average return reaches threshold x final.

    Raises:
        GenerationError: If the final moving average is not positive or is never reached.
    """
    ma = moving_average(returns, window)
    final = ma[-1]
    if final <= 0.0:
        raise GenerationError("sweep never produced a positive return")
    hits = np.flatnonzero(ma >= threshold * final)
    if hits.size == 0:
        raise GenerationError("moving average never reached the replay threshold")
    return int(hits[0])


def equal_interval_episodes(candidates: Sequence[int], lengths: Dict[int, int], budget: int) -> List[int]:
    """Smallest set of episodes at equal intervals whose lengths cover the budget.

    Falls back to all candidates when even they do not cover it.
    """
    candidates = list(candidates)
    if not candidates:
        return []
    mean_len = float(np.mean([lengths[i] for i in candidates]))
    k = max(1, min(len(candidates), math.ceil(budget / max(mean_len, 1.0))))
    while True:
        picks = np.unique(np.round(np.linspace(0, len(candidates) - 1, k)).astype(np.int64))
        chosen = [candidates[i] for i in picks]
        if sum(lengths[i] for i in chosen) >= budget or k >= len(candidates):
            return chosen
        k += 1


def _sweep_episode(
    spec: EmbodimentSpec,
    command: float,
    index: int,
    n_episodes: int,
    eta: float,
    sigma: float,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
) -> Episode:
    # Plateau episodes at the expert setting replay the expert stream, counted
    # back from the end of the sweep.
    if eta == 1.0 and sigma == sweep.expert_noise:
        rng = episode_rng(seed, _EXPERT_STREAM, spec.id, n_episodes - 1 - index)
    else:
        rng = episode_rng(seed, _SWEEP_STREAM, spec.id, index)
    return rollout(spec, command, make_controller(spec, eta, sigma, rng, env), env)


def _shard_from_episodes(
    spec: EmbodimentSpec,
    episodes: Sequence[Episode],
    phases: Sequence[int],
    etas: Sequence[float],
) -> RobotShard:
    starts = np.cumsum([0] + [ep.length for ep in episodes[:-1]]).astype(np.float64)
    d_j, d_f = descriptors(spec)
    columns = {
        name: np.concatenate([getattr(ep, name) for ep in episodes]).astype(np.float64)
        for name in TRANSITION_FIELDS
    }
    return RobotShard(
        robot_id=spec.id,
        episode_starts=starts,
        episode_phase=np.asarray(phases, dtype=np.float64),
        episode_eta=np.asarray(etas, dtype=np.float64),
        episode_return=np.array([ep.total_return for ep in episodes]),
        episode_reason=np.array([DONE_REASON_CODES[ep.done_reason] for ep in episodes], dtype=np.float64),
        d_j=d_j,
        d_f=d_f,
        **columns,
    )


def _check_budget(steps_per_robot: int, env: EnvSettings) -> None:
    if steps_per_robot < env.horizon:
        raise ConfigError(
            f"steps_per_robot={steps_per_robot} is below one horizon ({env.horizon})",
            field="steps_per_robot",
        )


def _expert_shard(
    spec: EmbodimentSpec,
    command: float,
    steps_per_robot: int,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
) -> RobotShard:
    error = expert_oracle(spec, command, env)
    if error >= env.tracking_tolerance:
        raise GenerationError(f"expert tracking error {error:.4f} exceeds {env.tracking_tolerance}", robot=spec.id)
    episodes: List[Episode] = []
    total = 0
    while total < steps_per_robot:
        rng = episode_rng(seed, _EXPERT_STREAM, spec.id, len(episodes))
        ep = rollout(spec, command, make_controller(spec, 1.0, sweep.expert_noise, rng, env), env)
        episodes.append(ep)
        total += ep.length
    n = len(episodes)
    return _shard_from_episodes(spec, episodes, [1] * n, [1.0] * n)


def _sweep_returns(
    spec: EmbodimentSpec,
    command: float,
    steps_per_robot: int,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Dict[int, int]]:
    n_episodes = sweep.sweep_factor * math.ceil(steps_per_robot / env.horizon)
    etas, sigmas = sweep_schedule(n_episodes, sweep)
    returns = np.zeros(n_episodes)
    lengths: Dict[int, int] = {}
    for i in range(n_episodes):
        ep = _sweep_episode(spec, command, i, n_episodes, etas[i], sigmas[i], seed, env, sweep)
        returns[i] = ep.total_return
        lengths[i] = ep.length
    return etas, sigmas, returns, lengths


def _materialize(
    spec: EmbodimentSpec,
    command: float,
    indices: Sequence[int],
    etas: np.ndarray,
    sigmas: np.ndarray,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
) -> RobotShard:
    episodes = [
        _sweep_episode(spec, command, i, etas.size, etas[i], sigmas[i], seed, env, sweep) for i in indices
    ]
    phases = [0 if etas[i] < sweep.phase_boundary else 1 for i in indices]
    return _shard_from_episodes(spec, episodes, phases, [float(etas[i]) for i in indices])


def _replay_shard(
    spec: EmbodimentSpec,
    command: float,
    steps_per_robot: int,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
) -> RobotShard:
    etas, sigmas, returns, lengths = _sweep_returns(spec, command, steps_per_robot, seed, env, sweep)
    try:
        cut = replay_truncation_index(returns, sweep.ma_window, sweep.replay_threshold)
    except GenerationError as exc:
        raise GenerationError(str(exc), robot=spec.id) from exc
    chosen = equal_interval_episodes(range(cut + 1), lengths, steps_per_robot)
    logger.debug("%s replay: truncated at episode %d of %d, kept %d", spec.id, cut, returns.size, len(chosen))
    return _materialize(spec, command, chosen, etas, sigmas, seed, env, sweep)


def _mixture_shard(
    spec: EmbodimentSpec,
    command: float,
    steps_per_robot: int,
    fraction: float,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
) -> RobotShard:
    etas, sigmas, returns, lengths = _sweep_returns(spec, command, steps_per_robot, seed, env, sweep)
    early = [i for i in range(etas.size) if etas[i] < sweep.phase_boundary]
    late = [i for i in range(etas.size) if etas[i] >= sweep.phase_boundary]
    early_budget = int(round(fraction * steps_per_robot))
    late_budget = steps_per_robot - early_budget

    chosen_early: List[int] = []
    if early_budget > 0:
        if sum(lengths[i] for i in early) < early_budget:
            raise GenerationError("early phase is shorter than the suboptimal share", robot=spec.id)
        chosen_early = equal_interval_episodes(early, lengths, early_budget)

    chosen_late: List[int] = []
    total = 0
    for i in reversed(late):
        if total >= late_budget:
            break
        chosen_late.append(i)
        total += lengths[i]
    if total < late_budget:
        raise GenerationError("late phase is shorter than the expert-like share", robot=spec.id)
    return _materialize(spec, command, chosen_early + sorted(chosen_late), etas, sigmas, seed, env, sweep)


def _generate_robot(
    variant: str,
    spec: EmbodimentSpec,
    command: float,
    steps_per_robot: int,
    fraction: float,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
) -> RobotShard:
    if variant == "expert":
        return _expert_shard(spec, command, steps_per_robot, seed, env, sweep)
    if variant == "replay":
        return _replay_shard(spec, command, steps_per_robot, seed, env, sweep)
    return _mixture_shard(spec, command, steps_per_robot, fraction, seed, env, sweep)


def _generate(
    variant: str,
    suite: Sequence[EmbodimentSpec],
    direction: str,
    steps_per_robot: int,
    fraction: float,
    seed: int,
    env: EnvSettings,
    sweep: SweepSettings,
    workers: int,
) -> Dataset:
    _check_budget(steps_per_robot, env)
    command = COMMANDS[direction]
    args = [(variant, spec, command, steps_per_robot, fraction, seed, env, sweep) for spec in suite]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            shards = list(pool.map(_generate_robot, *zip(*args)))
    else:
        shards = [_generate_robot(*a) for a in args]

    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        variant=variant,
        direction=direction,
        mixture_fraction=fraction,
        steps_per_robot=steps_per_robot,
        seed=seed,
        counts={s.robot_id: s.n_transitions for s in shards},
    )
    logger.info(
        "Generated %s-%s dataset: %d robots, %d transitions",
        variant, direction, len(shards), sum(s.n_transitions for s in shards),
    )
    return Dataset(manifest=manifest, shards={s.robot_id: s for s in shards})


def gen_expert(
    suite: Sequence[EmbodimentSpec],
    direction: str,
    steps_per_robot: int,
    seed: int,
    env: EnvSettings = EnvSettings(),
    sweep: SweepSettings = SweepSettings(),
    workers: int = 1,
) -> Dataset:
    """Expert controller (gain 1, small noise) rollouts until the step budget.

    Raises:
        GenerationError: If the expert fails its tracking check on any spec.
    """
    return _generate("expert", suite, direction, steps_per_robot, 0.0, seed, env, sweep, workers)


def gen_replay(
    suite: Sequence[EmbodimentSpec],
    direction: str,
    steps_per_robot: int,
    seed: int,
    env: EnvSettings = EnvSettings(),
    sweep: SweepSettings = SweepSettings(),
    workers: int = 1,
) -> Dataset:
    """Sweep episodes up to the first 90% moving-average crossing, subsampled whole."""
    return _generate("replay", suite, direction, steps_per_robot, 0.0, seed, env, sweep, workers)


def gen_mixture(
    suite: Sequence[EmbodimentSpec],
    direction: str,
    steps_per_robot: int,
    fraction: float,
    seed: int,
    env: EnvSettings = EnvSettings(),
    sweep: SweepSettings = SweepSettings(),
    workers: int = 1,
) -> Dataset:
    """fraction x steps from the early sweep phase, the rest from its tail."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"mixture fraction must lie in [0, 1], got {fraction}", field="fraction")
    return _generate("mixture", suite, direction, steps_per_robot, fraction, seed, env, sweep, workers)


def parse_variant_name(name: str) -> Tuple[str, float, str]:
    """'mixture70-forward' -> ('mixture', 0.7, 'forward')."""
    match = _VARIANT_NAME.match(name)
    if match is None:
        raise ConfigError(f"unknown dataset name '{name}'", field="dataset")
    kind, percent, direction = match.group(1), match.group(2), match.group(3)
    if percent is None:
        return kind, 0.0, direction
    value = int(percent)
    if value > 100:
        raise ConfigError(f"mixture percentage {value} exceeds 100", field="dataset")
    return "mixture", value / 100.0, direction


def generate_variant(
    name: str,
    suite: Sequence[EmbodimentSpec],
    steps_per_robot: int,
    seed: int,
    env: EnvSettings = EnvSettings(),
    sweep: SweepSettings = SweepSettings(),
    workers: int = 1,
) -> Dataset:
    kind, fraction, direction = parse_variant_name(name)
    return _generate(kind, suite, direction, steps_per_robot, fraction, seed, env, sweep, workers)


def episode_returns(shard: RobotShard) -> np.ndarray:
    return shard.episode_return.copy()


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write manifest.json and one blob per field under <robot>/.

    Returns:
        Path: The manifest path.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    robots: Dict[str, RobotEntry] = {}
    for robot in dataset.robots:
        shard = dataset.shards[robot]
        blobs = {name: write_blob(root, f"{robot}/{name}.f64", getattr(shard, name)) for name in SHARD_FIELDS}
        robots[robot] = RobotEntry(transitions=shard.n_transitions, episodes=shard.n_episodes, blobs=blobs)
    manifest = dataset.manifest.model_copy(
        update={"robots": robots, "counts": {r: e.transitions for r, e in robots.items()}}
    )
    target = root / MANIFEST_NAME
    target.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return target


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Load and validate a dataset directory.

    Raises:
        CorruptDataset: On a missing or unreadable manifest, a format version
            mismatch, a blob checksum or size failure, or a count mismatch.
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise CorruptDataset(f"unreadable manifest: {exc}", path=str(manifest_path)) from exc
    if manifest.format_version != FORMAT_VERSION:
        raise CorruptDataset(f"unsupported format version {manifest.format_version}", path=str(manifest_path))
    if set(manifest.counts) != set(manifest.robots):
        raise CorruptDataset("counts and robot entries disagree", path=str(manifest_path))

    shards: Dict[str, RobotShard] = {}
    for robot, entry in manifest.robots.items():
        if set(entry.blobs) != set(SHARD_FIELDS):
            raise CorruptDataset(f"{robot}: blob set does not match the shard layout", path=str(manifest_path))
        arrays = {name: read_blob(root, entry.blobs[name]) for name in SHARD_FIELDS}
        shard = RobotShard(robot_id=robot, **arrays)
        n = shard.n_transitions
        if any(arrays[name].shape[0] != n for name in TRANSITION_FIELDS):
            raise CorruptDataset(f"{robot}: transition fields differ in length", path=str(root / robot))
        if n != entry.transitions or n != manifest.counts[robot]:
            raise CorruptDataset(
                f"{robot}: manifest counts {manifest.counts[robot]}/{entry.transitions} but shard holds {n}",
                path=str(root / robot),
            )
        if shard.n_episodes != entry.episodes:
            raise CorruptDataset(f"{robot}: episode count mismatch", path=str(root / robot))
        shards[robot] = shard
    return Dataset(manifest=manifest, shards=shards)


def sample_batch(
    dataset: Union[Dataset, Dict[str, RobotShard]],
    robots: Sequence[str],
    per_robot_batch: int,
    rng: np.random.Generator,
) -> Batch:
    """Uniform with-replacement sampling of per_robot_batch transitions per robot.

    Raises:
        ConfigError: For an unknown robot id or a robot with too few transitions.
    """
    shards = dataset.shards if isinstance(dataset, Dataset) else dataset
    per_robot: Dict[str, RobotBatch] = {}
    for robot in robots:
        if robot not in shards:
            raise ConfigError(f"unknown robot id '{robot}'", field="robots")
        shard = shards[robot]
        if shard.n_transitions < per_robot_batch:
            raise ConfigError(
                f"{robot} holds {shard.n_transitions} transitions, fewer than per_robot_batch={per_robot_batch}",
                field="per_robot_batch",
            )
        index = rng.integers(0, shard.n_transitions, size=per_robot_batch)
        per_robot[robot] = RobotBatch(
            robot_id=robot,
            d_j=shard.d_j,
            d_f=shard.d_f,
            **{name: getattr(shard, name)[index] for name in TRANSITION_FIELDS},
        )
    return Batch(per_robot)
