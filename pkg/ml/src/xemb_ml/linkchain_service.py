"""
LinkChain embodiment family: a deterministic stand-in for legged robots.

Inputs:
- EmbodimentSpec describing joints, limbs, feet, dynamics and reward weights.

Outputs:
- Suites of 16 embodiments, environment steps, factorized observations,
  scripted controller actions, rollouts and evaluation returns.

Side Effects:
- None; every function is pure given its arguments and rng.

Dynamics per joint (semi-implicit Euler):
    qdot' = qdot + dt * (gear * a - damping * qdot - stiffness * q)
    q'    = q + dt * qdot'
Base velocity is v = sum_j w_j * qdot_j.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .errors import CorruptDataset, NumericalError, ShapeError
from .schemas import EmbodimentSpec, EnvSettings, SuiteManifest

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, float] = {"forward": 1.0, "backward": -1.0}
JOINT_OBS_DIM = 3
FOOT_OBS_DIM = 2
GENERAL_OBS_DIM = 3
JOINT_DESC_DIM = 4
FOOT_DESC_DIM = 2

# Base parameters per family; each robot jitters these by +-10%.
_FAMILY_BASE: Dict[str, Dict] = {
    "quadruped-like": {
        "prefix": "quad",
        "gear": 1.0,
        "damping": 0.5,
        "stiffness": 0.1,
        "k_track": 1.0,
        "n_limbs": 4,
        "limb_coupling": {4: [0.5], 8: [0.4, 0.25]},
    },
    "biped-like": {
        "prefix": "biped",
        "gear": 2.0,
        "damping": 0.8,
        "stiffness": 0.2,
        "k_track": 0.8,
        "n_limbs": 2,
        "limb_coupling": {2: [0.7], 4: [0.6, 0.35], 6: [0.5, 0.35, 0.25]},
    },
    "hexapod-like": {
        "prefix": "hexa",
        "gear": 0.6,
        "damping": 0.3,
        "stiffness": 0.05,
        "k_track": 1.2,
        "n_limbs": 6,
        "limb_coupling": {6: [0.3]},
    },
}

# 9 quadruped-like, 6 biped-like, 1 hexapod-like.
_SUITE_LAYOUT: Tuple[Tuple[str, int], ...] = (
    tuple(("quadruped-like", j) for j in (4, 4, 4, 4, 4, 4, 4, 8, 8))
    + tuple(("biped-like", j) for j in (2, 2, 4, 4, 6, 6))
    + (("hexapod-like", 6),)
)

TORQUE_WEIGHT = 0.05
RATE_WEIGHT = 1.5
LIMIT_MARGIN = 1.5
LIMIT_OFFSET = 0.5


@dataclass(frozen=True)
class EnvState:
    """Joint positions, velocities, last torque, step index and command."""

    q: np.ndarray
    qdot: np.ndarray
    prev_action: np.ndarray
    t: int
    command: float


@dataclass(frozen=True)
class StepResult:
    next: EnvState
    reward: float
    done: bool
    done_reason: str  # "none", "limit" or "horizon"


@dataclass(frozen=True)
class ObsBundle:
    """Factorized observation: general part, joint and foot sets, descriptors."""

    o_g: np.ndarray
    o_j: np.ndarray
    o_f: np.ndarray
    d_j: np.ndarray
    d_f: np.ndarray


@dataclass
class Episode:
    """Columnar record of one rollout."""

    robot_id: str
    command: float
    o_g: np.ndarray
    o_j: np.ndarray
    o_f: np.ndarray
    next_o_g: np.ndarray
    next_o_j: np.ndarray
    next_o_f: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    done_reason: str

    @property
    def length(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


Controller = Callable[[EnvState, ObsBundle], np.ndarray]
Policy = Callable[[ObsBundle], np.ndarray]


def target_velocity(spec: EmbodimentSpec, command: float) -> np.ndarray:
    """Per-joint velocity qdot*_j = c * w_j / sum_k w_k^2, so that v = c."""
    w = np.asarray(spec.coupling, dtype=np.float64)
    return command * w / float(w @ w)


def descriptors(spec: EmbodimentSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Joint descriptors [w_j, j/J, gear_j, q_limit_j] and foot descriptors [w_j(f), f/F]."""
    j_count, f_count = spec.n_joints, spec.n_feet
    d_j = np.array(
        [
            [spec.coupling[j], (j + 1) / j_count, spec.gear[j], spec.q_limit[j]]
            for j in range(j_count)
        ],
        dtype=np.float64,
    )
    d_f = np.array(
        [[spec.coupling[spec.foot_joints[f]], (f + 1) / f_count] for f in range(f_count)],
        dtype=np.float64,
    )
    return d_j, d_f


def reset(spec: EmbodimentSpec, command: float) -> EnvState:
    zeros = np.zeros(spec.n_joints, dtype=np.float64)
    return EnvState(q=zeros, qdot=zeros.copy(), prev_action=zeros.copy(), t=0, command=float(command))


def base_velocity(spec: EmbodimentSpec, qdot: np.ndarray) -> float:
    return float(np.asarray(spec.coupling, dtype=np.float64) @ qdot)


def observe(spec: EmbodimentSpec, state: EnvState) -> ObsBundle:
    """Build the factorized observation for a state."""
    w = np.asarray(spec.coupling, dtype=np.float64)
    v = float(w @ state.qdot)
    c = state.command
    o_g = np.array([c, v, v - c], dtype=np.float64)
    o_j = np.stack([state.q, state.qdot, state.prev_action], axis=1)
    feet = np.asarray(spec.foot_joints, dtype=np.int64)
    o_f = np.stack([state.q[feet], w[feet] * state.qdot[feet]], axis=1)
    d_j, d_f = descriptors(spec)
    return ObsBundle(o_g=o_g, o_j=o_j, o_f=o_f, d_j=d_j, d_f=d_f)


def reward_fn(
    spec: EmbodimentSpec,
    state: EnvState,
    action: np.ndarray,
    prev_action: np.ndarray,
    settings: EnvSettings = EnvSettings(),
) -> float:
    """Velocity tracking minus torque and action-rate penalties, clipped at zero.

    Args:
        spec (EmbodimentSpec): Robot definition (reward weights, coupling).
        state (EnvState): State whose base velocity is scored (post-step in `step`).
        action (np.ndarray): Applied torque.
        prev_action (np.ndarray): Torque applied on the previous step.
        settings (EnvSettings): Tracking kernel width.

    Returns:
        float: max(0, k_track*exp(-(v-c)^2/width) - k_torque*|a|^2 - k_rate*|a-a_prev|^2).
    """
    v = base_velocity(spec, state.qdot)
    track = spec.k_track * np.exp(-((v - state.command) ** 2) / settings.track_width)
    torque = spec.k_torque * float(action @ action)
    diff = action - prev_action
    rate = spec.k_rate * float(diff @ diff)
    return float(max(0.0, track - torque - rate))


def step(
    spec: EmbodimentSpec,
    state: EnvState,
    action: np.ndarray,
    settings: EnvSettings = EnvSettings(),
) -> StepResult:
    """Advance one control step.

    Raises:
        ShapeError: If the action length differs from the joint count.
        NumericalError: If the state or action is non-finite.
    """
    a = np.clip(np.asarray(action, dtype=np.float64), -settings.a_max, settings.a_max)
    if a.shape != (spec.n_joints,):
        raise ShapeError(f"{spec.id}: action must have {spec.n_joints} entries, got {a.shape}")
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qdot)) and np.all(np.isfinite(a))):
        raise NumericalError(f"{spec.id}: non-finite state or action at t={state.t}", segment="state")

    gear = np.asarray(spec.gear)
    damping = np.asarray(spec.damping)
    stiffness = np.asarray(spec.stiffness)
    qdot_next = state.qdot + settings.dt * (gear * a - damping * state.qdot - stiffness * state.q)
    q_next = state.q + settings.dt * qdot_next
    nxt = EnvState(q=q_next, qdot=qdot_next, prev_action=a, t=state.t + 1, command=state.command)

    reward = reward_fn(spec, nxt, a, state.prev_action, settings)
    limit = bool(np.any(np.abs(q_next) > np.asarray(spec.q_limit)))
    horizon = state.t + 1 >= settings.horizon
    reason = "limit" if limit else ("horizon" if horizon else "none")
    return StepResult(next=nxt, reward=reward, done=limit or horizon, done_reason=reason)


def scripted_controller(
    spec: EmbodimentSpec,
    state: EnvState,
    gain: float,
    noise: float,
    rng: Optional[np.random.Generator],
    settings: EnvSettings = EnvSettings(),
) -> np.ndarray:
    """Velocity-tracking controller with feedforward compensation.

    a_j = clip(gain * [Kp (qdot*_j - qdot_j) + (stiffness_j q_j + damping_j qdot*_j) / gear_j]
               + noise * xi_j, +-a_max)
    """
    target = target_velocity(spec, state.command)
    gear = np.asarray(spec.gear)
    feedforward = (np.asarray(spec.stiffness) * state.q + np.asarray(spec.damping) * target) / gear
    action = gain * (settings.kp * (target - state.qdot) + feedforward)
    if noise > 0.0:
        action = action + noise * rng.standard_normal(spec.n_joints)
    return np.clip(action, -settings.a_max, settings.a_max)


def make_controller(
    spec: EmbodimentSpec,
    gain: float,
    noise: float,
    rng: Optional[np.random.Generator],
    settings: EnvSettings = EnvSettings(),
) -> Controller:
    def controller(state: EnvState, obs: ObsBundle) -> np.ndarray:
        return scripted_controller(spec, state, gain, noise, rng, settings)

    return controller


def rollout(
    spec: EmbodimentSpec,
    command: float,
    controller: Controller,
    settings: EnvSettings = EnvSettings(),
) -> Episode:
    """Run one episode from the zero state until done."""
    state = reset(spec, command)
    obs = observe(spec, state)
    rows: Dict[str, List[np.ndarray]] = {k: [] for k in ("o_g", "o_j", "o_f", "n_g", "n_j", "n_f", "a")}
    rewards: List[float] = []
    dones: List[bool] = []
    reason = "none"
    while True:
        action = np.clip(controller(state, obs), -settings.a_max, settings.a_max)
        result = step(spec, state, action, settings)
        next_obs = observe(spec, result.next)
        rows["o_g"].append(obs.o_g)
        rows["o_j"].append(obs.o_j)
        rows["o_f"].append(obs.o_f)
        rows["n_g"].append(next_obs.o_g)
        rows["n_j"].append(next_obs.o_j)
        rows["n_f"].append(next_obs.o_f)
        rows["a"].append(result.next.prev_action)
        rewards.append(result.reward)
        dones.append(result.done)
        state, obs = result.next, next_obs
        if result.done:
            reason = result.done_reason
            break

    return Episode(
        robot_id=spec.id,
        command=float(command),
        o_g=np.stack(rows["o_g"]),
        o_j=np.stack(rows["o_j"]),
        o_f=np.stack(rows["o_f"]),
        next_o_g=np.stack(rows["n_g"]),
        next_o_j=np.stack(rows["n_j"]),
        next_o_f=np.stack(rows["n_f"]),
        actions=np.stack(rows["a"]),
        rewards=np.asarray(rewards, dtype=np.float64),
        dones=np.asarray(dones, dtype=bool),
        done_reason=reason,
    )


def tracking_error(spec: EmbodimentSpec, episode: Episode, transient: int) -> float:
    """Mean |v - c| over steps after the transient (uses next-state velocity)."""
    errors = np.abs(episode.next_o_g[:, 2])
    tail = errors[transient:]
    return float(tail.mean()) if tail.size else float("inf")


def expert_oracle(spec: EmbodimentSpec, command: float, settings: EnvSettings = EnvSettings()) -> float:
    """Tracking error of the noiseless full-gain controller."""
    episode = rollout(spec, command, make_controller(spec, 1.0, 0.0, None, settings), settings)
    return tracking_error(spec, episode, settings.transient)


def evaluate(
    policy: Policy,
    spec: EmbodimentSpec,
    command: float,
    n_episodes: int,
    rng: Optional[np.random.Generator] = None,
    settings: EnvSettings = EnvSettings(),
) -> float:
    """Mean undiscounted return of a deterministic policy over n_episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    returns = [
        rollout(spec, command, lambda state, obs: policy(obs), settings).total_return
        for _ in range(n_episodes)
    ]
    return float(np.mean(returns))


def _jitter(rng: np.random.Generator, base: Sequence[float]) -> List[float]:
    return [float(b * rng.uniform(0.9, 1.1)) for b in base]


def _build_spec(
    rng: np.random.Generator,
    family: str,
    n_joints: int,
    index: int,
    settings: EnvSettings,
) -> EmbodimentSpec:
    base = _FAMILY_BASE[family]
    n_limbs = base["n_limbs"]
    per_limb = n_joints // n_limbs
    limbs = [list(range(limb * per_limb, (limb + 1) * per_limb)) for limb in range(n_limbs)]
    coupling = _jitter(rng, base["limb_coupling"][n_joints] * n_limbs)
    gear = _jitter(rng, [base["gear"]] * n_joints)
    damping = _jitter(rng, [base["damping"]] * n_joints)
    stiffness = _jitter(rng, [base["stiffness"]] * n_joints)

    # Joint range covers a full expert episode at unit command with margin.
    w = np.asarray(coupling)
    qdot_star = np.abs(w) / float(w @ w)
    span = settings.horizon * settings.dt
    q_limit = [float(LIMIT_MARGIN * span * s + LIMIT_OFFSET) for s in qdot_star]

    k_track = base["k_track"] * float(rng.uniform(0.95, 1.05))
    return EmbodimentSpec(
        id=f"{base['prefix']}-{index:02d}",
        family=family,
        n_joints=n_joints,
        n_feet=n_limbs,
        coupling=coupling,
        gear=gear,
        damping=damping,
        stiffness=stiffness,
        q_limit=q_limit,
        limbs=limbs,
        foot_joints=[limb[-1] for limb in limbs],
        k_track=k_track,
        k_torque=TORQUE_WEIGHT * k_track / n_joints,
        k_rate=RATE_WEIGHT * k_track / n_joints,
    )


def make_suite(seed: int, settings: EnvSettings = EnvSettings()) -> List[EmbodimentSpec]:
    """Generate the 16-embodiment suite (9 quadruped-, 6 biped-, 1 hexapod-like).

    Args:
        seed (int): Generation seed; equal seeds give identical suites.
        settings (EnvSettings): Horizon and dt used to size joint limits.

    Returns:
        List[EmbodimentSpec]: Specs sorted by id.
    """
    rng = np.random.default_rng(seed)
    counters: Dict[str, int] = {}
    specs = []
    for family, n_joints in _SUITE_LAYOUT:
        index = counters.get(family, 0)
        counters[family] = index + 1
        specs.append(_build_spec(rng, family, n_joints, index, settings))
    specs.sort(key=lambda s: s.id)
    logger.info("Generated suite of %d embodiments (seed=%d)", len(specs), seed)
    return specs


def expert_reference_scores(
    suite: Sequence[EmbodimentSpec],
    command: float = 1.0,
    settings: EnvSettings = EnvSettings(),
) -> Dict[str, float]:
    """Return of the noiseless expert controller per embodiment."""
    return {
        spec.id: rollout(spec, command, make_controller(spec, 1.0, 0.0, None, settings), settings).total_return
        for spec in suite
    }


def d_max(suite: Sequence[EmbodimentSpec]) -> int:
    return max(spec.n_joints for spec in suite)


def save_suite(
    suite: Sequence[EmbodimentSpec],
    seed: int,
    path: Union[str, Path],
    settings: EnvSettings = EnvSettings(),
) -> SuiteManifest:
    """Write the suite manifest (specs, expert scores, seed) as JSON."""
    manifest = SuiteManifest(
        seed=seed,
        env=settings,
        specs=list(suite),
        expert_scores=expert_reference_scores(suite, 1.0, settings),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return manifest


def load_suite(path: Union[str, Path]) -> SuiteManifest:
    try:
        return SuiteManifest.model_validate_json(Path(path).read_text())
    except ValidationError as exc:
        raise CorruptDataset(f"invalid suite manifest: {exc.error_count()} error(s)", path=str(path)) from exc
