"""
Offline RL trainers over a multi-embodiment dataset.

Responsibilities:
- BC, IQL (expectile V, TD Q, advantage-weighted actor) and TD3+BC updates on
  per-robot minibatches.
- The embodiment-grouped iteration: one global critic step, a target update,
  then one actor step per robot group in shuffled order.
- Variants: grouped critic, PCGrad-combined per-robot actor gradients,
  compute-normalized ungrouped baseline, random and family-tag groupings.
- Training loop with periodic evaluation, update log, checkpoints, and the
  pre-train / fine-tune workflow.

Notes:
- All randomness comes from four named streams (sampling, shuffle, noise,
  init) spawned from the run seed. Grouping only consumes the shuffle stream,
  so one group reproduces the ungrouped trajectory bit for bit.
- The policy, the value network and the twin-Q network own disjoint parameter
  vectors and optimizer states; actor steps never touch critic parameters.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .dataset_service import Batch, Dataset, RobotBatch, sample_batch
from .errors import ConfigError, DegenerateGradient, GroupingError, LayoutError
from .linkchain_service import COMMANDS, evaluate
from .morphology_service import cluster, suite_distance_matrix
from .numerics_service import (
    DEGENERATE_NORM,
    DTYPE,
    LossFn,
    OptimState,
    ParamVector,
    ema,
    grad_of,
    load_params,
    optim_step,
    save_params,
)
from .schemas import EmbodimentSpec, EnvSettings, FGWSettings, GroupAssignment, LatentConfig, TrainConfig
from .urma_service import (
    ModelBundle,
    ObsTensors,
    build_models,
    deterministic_action,
    log_prob,
    make_policy,
    policy_forward,
    save_model_manifest,
    state_action_value,
    state_value,
)

logger = logging.getLogger(__name__)

STREAMS = ("sampling", "shuffle", "noise", "init")


class RngStreams:
    """Named numpy generators derived from one run seed."""

    def __init__(self, seed: int) -> None:
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        self.sampling, self.shuffle, self.noise, init = (np.random.default_rng(c) for c in children)
        self.init_seed = int(init.integers(0, 2**31 - 1))


@dataclass(frozen=True)
class RobotTensors:
    """One robot's sub-batch as float64 tensors; `weights` holds AWR weights when computed."""

    obs: ObsTensors
    next_obs: ObsTensors
    actions: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    weights: Optional[torch.Tensor] = None

    @classmethod
    def from_batch(cls, batch: RobotBatch) -> "RobotTensors":
        as_t = lambda x: torch.as_tensor(np.asarray(x), dtype=DTYPE)
        return cls(
            obs=ObsTensors.from_batch(batch),
            next_obs=ObsTensors.from_batch(batch, next_obs=True),
            actions=as_t(batch.actions),
            rewards=as_t(batch.rewards),
            dones=as_t(batch.dones),
        )

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    def take(self, index: np.ndarray) -> "RobotTensors":
        idx = torch.as_tensor(index, dtype=torch.long)
        pick = lambda o: ObsTensors(o.o_g[idx], o.o_j[idx], o.o_f[idx], o.d_j, o.d_f)
        return RobotTensors(
            obs=pick(self.obs),
            next_obs=pick(self.next_obs),
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            dones=self.dones[idx],
            weights=None if self.weights is None else self.weights[idx],
        )


# Ordered robot id -> sub-batch.
TensorBatch = Dict[str, RobotTensors]


def to_tensors(batch: Batch) -> TensorBatch:
    return {robot: RobotTensors.from_batch(b) for robot, b in batch.per_robot.items()}


def filter_batch(batch: TensorBatch, robots: Sequence[str]) -> TensorBatch:
    """Sub-batch of the given robots, keeping the batch's robot order.

    Raises:
        GroupingError: If no robot of the group is present.
    """
    wanted = set(robots)
    out = {robot: rows for robot, rows in batch.items() if robot in wanted}
    if not out:
        raise GroupingError(f"group {sorted(wanted)} has no samples in the batch")
    return out


def split_batch(batch: TensorBatch, parts: int) -> List[TensorBatch]:
    """Split every robot's rows into `parts` contiguous chunks."""
    chunks: List[TensorBatch] = [{} for _ in range(parts)]
    for robot, rows in batch.items():
        for k, index in enumerate(np.array_split(np.arange(len(rows)), parts)):
            if index.size == 0:
                raise GroupingError(f"{robot}: batch of {len(rows)} cannot be split into {parts} parts")
            chunks[k][robot] = rows.take(index)
    return chunks


@dataclass(frozen=True)
class TrainerState:
    config: TrainConfig
    models: ModelBundle
    policy: ParamVector
    value: ParamVector
    q: ParamVector
    target_q: ParamVector
    target_policy: ParamVector
    policy_opt: OptimState
    value_opt: OptimState
    q_opt: OptimState
    rngs: RngStreams
    step: int = 0
    critic_steps: int = 0
    actor_steps: int = 0
    actor_samples: int = 0
    last_losses: Dict[str, float] = field(default_factory=dict)


def init_state(
    config: TrainConfig,
    d_max: int,
    latent: LatentConfig = LatentConfig(),
    models: Optional[ModelBundle] = None,
) -> TrainerState:
    """Fresh trainer: networks initialized from the init stream of config.seed."""
    rngs = RngStreams(config.seed)
    models = models or build_models(latent, d_max, rngs.init_seed)
    opt = lambda p: OptimState.init(p, lr=config.lr)
    return TrainerState(
        config=config,
        models=models,
        policy=models.policy_params,
        value=models.value_params,
        q=models.q_params,
        target_q=models.q_params,
        target_policy=models.policy_params,
        policy_opt=opt(models.policy_params),
        value_opt=opt(models.value_params),
        q_opt=opt(models.q_params),
        rngs=rngs,
    )


def expectile_loss(u: torch.Tensor, tau: float) -> torch.Tensor:
    """Elementwise |tau - 1[u < 0]| * u^2."""
    return torch.abs(tau - (u < 0).to(u.dtype)) * u.pow(2)


def _cat(parts: List[torch.Tensor]) -> torch.Tensor:
    return torch.cat(parts) if len(parts) > 1 else parts[0]


def _min_q(models: ModelBundle, views, obs: ObsTensors, actions: torch.Tensor) -> torch.Tensor:
    q1, q2 = state_action_value(models.qnet, views, obs, actions)
    return torch.minimum(q1, q2)


def iql_value_loss(state: TrainerState, batch: TensorBatch) -> LossFn:
    """Expectile regression of V toward min of the target Q heads."""
    target_views = state.target_q.unflatten()
    with torch.no_grad():
        targets = {r: _min_q(state.models, target_views, b.obs, b.actions) for r, b in batch.items()}
    tau = state.config.expectile

    def loss(params):
        diffs = [targets[r] - state_value(state.models.value, params, b.obs) for r, b in batch.items()]
        return expectile_loss(_cat(diffs), tau).mean()

    return loss


def iql_q_loss(state: TrainerState, batch: TensorBatch) -> LossFn:
    """Squared TD error of both Q heads against r + gamma (1 - d) V(s')."""
    value_views = state.value.unflatten()
    gamma = state.config.gamma
    with torch.no_grad():
        targets = {
            r: b.rewards + gamma * (1.0 - b.dones) * state_value(state.models.value, value_views, b.next_obs)
            for r, b in batch.items()
        }

    def loss(params):
        q1s, q2s, ys = [], [], []
        for r, b in batch.items():
            q1, q2 = state_action_value(state.models.qnet, params, b.obs, b.actions)
            q1s.append(q1)
            q2s.append(q2)
            ys.append(targets[r])
        y = _cat(ys)
        return (y - _cat(q1s)).pow(2).mean() + (y - _cat(q2s)).pow(2).mean()

    return loss


def awr_weights(state: TrainerState, batch: TensorBatch) -> TensorBatch:
    """Attach min(exp(beta (min Q_target - V)), cap) to every robot's rows."""
    q_views = state.target_q.unflatten()
    v_views = state.value.unflatten()
    cfg = state.config
    out: TensorBatch = {}
    with torch.no_grad():
        for robot, rows in batch.items():
            advantage = _min_q(state.models, q_views, rows.obs, rows.actions) - state_value(
                state.models.value, v_views, rows.obs
            )
            weights = torch.clamp(torch.exp(cfg.beta * advantage), max=cfg.awr_weight_cap)
            out[robot] = replace(rows, weights=weights)
    return out


def bc_loss(state: TrainerState, batch: TensorBatch) -> LossFn:
    """Mean negative log-likelihood of dataset actions."""

    def loss(params):
        logps = [log_prob(state.models.policy, params, b.obs, b.actions) for b in batch.values()]
        return -_cat(logps).mean()

    return loss


def iql_actor_loss(state: TrainerState, batch: TensorBatch) -> LossFn:
    """-mean(w * log pi(a|s)) with weights precomputed by awr_weights."""
    if any(b.weights is None for b in batch.values()):
        batch = awr_weights(state, batch)

    def loss(params):
        terms = [b.weights * log_prob(state.models.policy, params, b.obs, b.actions) for b in batch.values()]
        return -_cat(terms).mean()

    return loss


def td3bc_actor_loss(state: TrainerState, batch: TensorBatch) -> LossFn:
    """-lambda * mean Q1(s, mu(s)) + mean sum_j (mu_j - a_j)^2 with lambda = alpha / mean|Q1|."""
    q_views = state.q.unflatten()
    cfg = state.config

    def loss(params):
        q_values, sq_errors = [], []
        for b in batch.values():
            mu, _ = policy_forward(state.models.policy, params, b.obs)
            q1, _ = state_action_value(state.models.qnet, q_views, b.obs, mu.clamp(-cfg.a_max, cfg.a_max))
            q_values.append(q1)
            sq_errors.append((mu - b.actions).pow(2).sum(dim=-1))
        q = _cat(q_values)
        lam = cfg.bc_weight / q.abs().mean().detach().clamp_min(1e-12)
        return -lam * q.mean() + _cat(sq_errors).mean()

    return loss


def td3bc_critic_loss(state: TrainerState, batch: TensorBatch) -> LossFn:
    """Twin-Q TD loss toward the target policy with clipped smoothing noise."""
    cfg = state.config
    target_q = state.target_q.unflatten()
    target_pi = state.target_policy.unflatten()
    targets = {}
    with torch.no_grad():
        for robot, b in batch.items():
            mean = deterministic_action(state.models.policy, target_pi, b.next_obs, cfg.a_max)
            draw = torch.as_tensor(state.rngs.noise.standard_normal(tuple(mean.shape)), dtype=DTYPE)
            noise = torch.clamp(cfg.policy_noise * draw, -cfg.noise_clip, cfg.noise_clip)
            next_action = torch.clamp(mean + noise, -cfg.a_max, cfg.a_max)
            next_q = _min_q(state.models, target_q, b.next_obs, next_action)
            targets[robot] = b.rewards + cfg.gamma * (1.0 - b.dones) * next_q

    def loss(params):
        q1s, q2s, ys = [], [], []
        for robot, b in batch.items():
            q1, q2 = state_action_value(state.models.qnet, params, b.obs, b.actions)
            q1s.append(q1)
            q2s.append(q2)
            ys.append(targets[robot])
        y = _cat(ys)
        return (y - _cat(q1s)).pow(2).mean() + (y - _cat(q2s)).pow(2).mean()

    return loss


def actor_loss(state: TrainerState, batch: TensorBatch) -> LossFn:
    """Actor objective of the configured algorithm on a (sub-)batch."""
    algorithm = state.config.algorithm
    if algorithm == "bc":
        return bc_loss(state, batch)
    if algorithm == "iql":
        return iql_actor_loss(state, batch)
    return td3bc_actor_loss(state, batch)


def _losses(state: TrainerState, **values: float) -> Dict[str, float]:
    merged = dict(state.last_losses)
    merged.update(values)
    return merged


def actor_update(state: TrainerState, batch: TensorBatch) -> TrainerState:
    """One optimizer step of the actor on the given (sub-)batch."""
    report = grad_of(actor_loss(state, batch), state.policy)
    policy, opt = optim_step(state.policy, report.grad, state.policy_opt, state.config.max_grad_norm)
    return replace(
        state,
        policy=policy,
        policy_opt=opt,
        actor_steps=state.actor_steps + 1,
        actor_samples=state.actor_samples + sum(len(b) for b in batch.values()),
        last_losses=_losses(state, actor=report.loss),
    )


def critic_step(state: TrainerState, batch: TensorBatch) -> TrainerState:
    """Critic optimizer step(s) without touching the targets."""
    cfg = state.config
    if cfg.algorithm == "iql":
        v_report = grad_of(iql_value_loss(state, batch), state.value)
        value, value_opt = optim_step(state.value, v_report.grad, state.value_opt, cfg.max_grad_norm)
        state = replace(state, value=value, value_opt=value_opt)
        q_report = grad_of(iql_q_loss(state, batch), state.q)
        losses = {"value": v_report.loss, "q": q_report.loss}
    elif cfg.algorithm == "td3bc":
        q_report = grad_of(td3bc_critic_loss(state, batch), state.q)
        losses = {"q": q_report.loss}
    else:
        raise ConfigError("behavior cloning has no critic", field="algorithm")
    q, q_opt = optim_step(state.q, q_report.grad, state.q_opt, cfg.max_grad_norm)
    return replace(
        state, q=q, q_opt=q_opt, critic_steps=state.critic_steps + 1, last_losses=_losses(state, **losses)
    )


def update_targets(state: TrainerState) -> TrainerState:
    tau = state.config.tau_target
    target_policy = state.target_policy
    if state.config.algorithm == "td3bc":
        target_policy = ema(state.target_policy, state.policy, tau)
    return replace(state, target_q=ema(state.target_q, state.q, tau), target_policy=target_policy)


def bc_update(state: TrainerState, batch: TensorBatch) -> TrainerState:
    return actor_update(state, batch)


def iql_critic_update(state: TrainerState, batch: TensorBatch) -> TrainerState:
    """V step, Q step, then EMA of the target Q."""
    return update_targets(critic_step(state, batch))


def td3bc_update(state: TrainerState, batch: TensorBatch) -> TrainerState:
    """Critic step, target EMA, and an actor step every policy_freq-th critic step."""
    state = update_targets(critic_step(state, batch))
    if state.critic_steps % state.config.policy_freq == 0:
        state = actor_update(state, batch)
    return state


def _actor_due(state: TrainerState, iteration: int) -> bool:
    return state.config.algorithm != "td3bc" or iteration % state.config.policy_freq == 0


def prepare_actor_batch(state: TrainerState, batch: TensorBatch) -> TensorBatch:
    return awr_weights(state, batch) if state.config.algorithm == "iql" else batch


def _sample(state: TrainerState, dataset: Dataset, robots: Sequence[str], per_robot_batch: int) -> TensorBatch:
    return to_tensors(sample_batch(dataset, robots, per_robot_batch, state.rngs.sampling))


def baseline_train_step(state: TrainerState, dataset: Dataset, robots: Sequence[str]) -> TrainerState:
    """Ungrouped iteration: critic, targets, one actor step on the whole batch."""
    iteration = state.step + 1
    batch = _sample(state, dataset, robots, state.config.per_robot_batch)
    if state.config.algorithm != "bc":
        state = update_targets(critic_step(state, batch))
    if _actor_due(state, iteration):
        state = actor_update(state, prepare_actor_batch(state, batch))
    return replace(state, step=iteration)


def eg_train_step(
    state: TrainerState,
    groups: GroupAssignment,
    dataset: Dataset,
    robots: Optional[Sequence[str]] = None,
) -> TrainerState:
    """Grouped iteration: global critic step, targets, then one actor step per group in shuffled order."""
    robots = sorted(groups.mapping) if robots is None else robots
    iteration = state.step + 1
    batch = _sample(state, dataset, robots, state.config.per_robot_batch)
    if state.config.algorithm != "bc":
        state = update_targets(critic_step(state, batch))
    members = groups.groups()
    order = state.rngs.shuffle.permutation(groups.m)
    if _actor_due(state, iteration):
        actor_batch = prepare_actor_batch(state, batch)
        for g in order:
            state = actor_update(state, filter_batch(actor_batch, members[g]))
    return replace(state, step=iteration)


def eg_critic_variant(
    state: TrainerState,
    groups: GroupAssignment,
    dataset: Dataset,
    robots: Optional[Sequence[str]] = None,
) -> TrainerState:
    """Grouped critic steps in shuffled order, one target update, then grouped actor steps."""
    if state.config.algorithm == "bc":
        return eg_train_step(state, groups, dataset, robots)
    robots = sorted(groups.mapping) if robots is None else robots
    iteration = state.step + 1
    batch = _sample(state, dataset, robots, state.config.per_robot_batch)
    members = groups.groups()
    order = state.rngs.shuffle.permutation(groups.m)
    for g in order:
        state = critic_step(state, filter_batch(batch, members[g]))
    state = update_targets(state)
    if _actor_due(state, iteration):
        actor_batch = prepare_actor_batch(state, batch)
        for g in order:
            state = actor_update(state, filter_batch(actor_batch, members[g]))
    return replace(state, step=iteration)


def normalized_train_step(state: TrainerState, dataset: Dataset, robots: Sequence[str], m: int) -> TrainerState:
    """Ungrouped iteration with m actor steps on batch chunks of size per_robot_batch / m."""
    iteration = state.step + 1
    batch = _sample(state, dataset, robots, state.config.per_robot_batch)
    if state.config.algorithm != "bc":
        state = update_targets(critic_step(state, batch))
    if _actor_due(state, iteration):
        for chunk in split_batch(prepare_actor_batch(state, batch), m):
            state = actor_update(state, chunk)
    return replace(state, step=iteration)


def pcgrad_project(
    grads: Dict[str, ParamVector], rng: np.random.Generator
) -> Dict[str, Tuple[ParamVector, Optional[str]]]:
    """Project each gradient away from every conflicting other gradient.

    Returns:
        Dict[str, Tuple[ParamVector, Optional[str]]]: Projected gradient per
        robot and the last robot it was projected on (None if never).

    Raises:
        ConfigError: With fewer than two gradients.
        LayoutError: If layouts differ.
        DegenerateGradient: If any gradient norm is below 1e-12.
    """
    names = list(grads)
    if len(names) < 2:
        raise ConfigError("pcgrad needs at least two gradients", field="grads")
    layout = grads[names[0]].layout
    for name in names:
        if grads[name].layout != layout:
            raise LayoutError(f"gradient of {name} has a different layout")
        if grads[name].norm() < DEGENERATE_NORM:
            raise DegenerateGradient("gradient norm below threshold", robot=name)

    out: Dict[str, Tuple[ParamVector, Optional[str]]] = {}
    for i in (names[k] for k in rng.permutation(len(names))):
        g = grads[i].values.clone()
        last: Optional[str] = None
        others = [n for n in names if n != i]
        for j in (others[k] for k in rng.permutation(len(others))):
            other = grads[j].values
            dot = torch.dot(g, other)
            if dot < 0:
                g = g - dot / torch.dot(other, other) * other
                last = j
        out[i] = (ParamVector(g, layout), last)
    return out


def pcgrad_combine(grads: Dict[str, ParamVector], rng: np.random.Generator) -> ParamVector:
    """Mean of the PCGrad-projected gradients (sorted robot order)."""
    projected = pcgrad_project(grads, rng)
    stacked = torch.stack([projected[name][0].values for name in sorted(projected)])
    return ParamVector(stacked.mean(dim=0), grads[next(iter(grads))].layout)


def pcgrad_train_step(state: TrainerState, dataset: Dataset, robots: Sequence[str]) -> TrainerState:
    """Ungrouped iteration whose actor step combines per-robot gradients with PCGrad."""
    iteration = state.step + 1
    batch = _sample(state, dataset, robots, state.config.per_robot_batch)
    if state.config.algorithm != "bc":
        state = update_targets(critic_step(state, batch))
    if _actor_due(state, iteration):
        actor_batch = prepare_actor_batch(state, batch)
        reports = {r: grad_of(actor_loss(state, {r: rows}), state.policy) for r, rows in actor_batch.items()}
        combined = pcgrad_combine({r: rep.grad for r, rep in reports.items()}, state.rngs.shuffle)
        policy, opt = optim_step(state.policy, combined, state.policy_opt, state.config.max_grad_norm)
        state = replace(
            state,
            policy=policy,
            policy_opt=opt,
            actor_steps=state.actor_steps + 1,
            actor_samples=state.actor_samples + sum(len(b) for b in actor_batch.values()),
            last_losses=_losses(state, actor=float(np.mean([rep.loss for rep in reports.values()]))),
        )
    return replace(state, step=iteration)


def random_grouping(robots: Sequence[str], m: int, seed: int) -> GroupAssignment:
    """Seeded random partition: shuffled robots dealt round-robin into m groups."""
    robots = sorted(robots)
    if not 1 <= m <= len(robots):
        raise ConfigError(f"m must lie in [1, {len(robots)}], got {m}", field="m")
    order = np.random.default_rng([seed, m]).permutation(len(robots))
    return GroupAssignment(m=m, mapping={robots[k]: pos % m for pos, k in enumerate(order)})


def heuristic_grouping(specs: Sequence[EmbodimentSpec]) -> GroupAssignment:
    """One group per family tag present, ordered by tag name."""
    families = sorted({spec.family for spec in specs})
    index = {family: g for g, family in enumerate(families)}
    return GroupAssignment(m=len(families), mapping={spec.id: index[spec.family] for spec in specs})


def resolve_groups(
    config: TrainConfig,
    specs: Sequence[EmbodimentSpec],
    fgw: FGWSettings = FGWSettings(),
) -> Optional[GroupAssignment]:
    """Group assignment for the configured grouping (None when ungrouped)."""
    if config.grouping == "none":
        return None
    if config.grouping == "heuristic":
        return heuristic_grouping(specs)
    if config.grouping == "random":
        return random_grouping([s.id for s in specs], config.m, config.seed)
    return cluster(suite_distance_matrix(specs, fgw), config.m, fgw.linkage)


def train_iteration(
    state: TrainerState,
    dataset: Dataset,
    robots: Sequence[str],
    groups: Optional[GroupAssignment],
) -> TrainerState:
    """Dispatch one outer iteration according to the config."""
    cfg = state.config
    if groups is not None:
        if cfg.critic_grouping:
            return eg_critic_variant(state, groups, dataset, robots)
        return eg_train_step(state, groups, dataset, robots)
    if cfg.conflict_resolver == "pcgrad":
        return pcgrad_train_step(state, dataset, robots)
    if cfg.normalized_mode:
        return normalized_train_step(state, dataset, robots, cfg.m)
    return baseline_train_step(state, dataset, robots)


@dataclass
class TrainingResult:
    state: TrainerState
    groups: Optional[GroupAssignment]
    evaluations: List[Dict[str, object]] = field(default_factory=list)
    log: List[Dict[str, object]] = field(default_factory=list)

    def final_returns(self) -> Dict[str, float]:
        """Return per robot at the last evaluation point."""
        if not self.evaluations:
            return {}
        last = max(row["step"] for row in self.evaluations)
        return {row["robot"]: row["return"] for row in self.evaluations if row["step"] == last}

    def curve(self, robot: str) -> List[Tuple[int, float]]:
        return [(row["step"], row["return"]) for row in self.evaluations if row["robot"] == robot]


def evaluate_policy(
    state: TrainerState,
    specs: Sequence[EmbodimentSpec],
    command: float,
    env: EnvSettings = EnvSettings(),
) -> Dict[str, float]:
    """Mean deterministic return per robot, keyed in sorted id order."""
    policy = make_policy(state.models, state.policy, state.config.a_max)
    returns = {}
    for spec in sorted(specs, key=lambda s: s.id):
        returns[spec.id] = evaluate(policy, spec, command, state.config.eval_episodes, None, env)
    return returns


def run_training(
    config: TrainConfig,
    suite: Sequence[EmbodimentSpec],
    dataset: Dataset,
    robots: Optional[Sequence[str]] = None,
    latent: LatentConfig = LatentConfig(),
    env: EnvSettings = EnvSettings(),
    groups: Optional[GroupAssignment] = None,
    fgw: FGWSettings = FGWSettings(),
    state: Optional[TrainerState] = None,
    updates: Optional[int] = None,
    eval_every: Optional[int] = None,
    on_iteration: Optional[Callable[[TrainerState], None]] = None,
) -> TrainingResult:
    """Full training loop with periodic evaluation.

    Args:
        config (TrainConfig): Algorithm, grouping and hyperparameters.
        suite (Sequence[EmbodimentSpec]): Suite the dataset was generated on.
        dataset (Dataset): Offline data; must cover `robots`.
        robots (Optional[Sequence[str]]): Training robots (default: all in dataset).
        latent (LatentConfig): Network widths.
        env (EnvSettings): Evaluation environment constants.
        groups (Optional[GroupAssignment]): Overrides the configured grouping.
        fgw (FGWSettings): Solver settings for morphology grouping.
        state (Optional[TrainerState]): Continue from this state instead of a fresh one.
        updates (Optional[int]): Iterations to run (default config.updates).
        eval_every (Optional[int]): Evaluation cadence (default config's).
        on_iteration (Optional[Callable]): Probe invoked after every iteration.

    Returns:
        TrainingResult: Final state, groups, evaluation rows and update log.
    """
    robots = sorted(robots or dataset.robots)
    missing = [r for r in robots if r not in dataset.shards]
    if missing:
        raise ConfigError(f"dataset has no data for {missing}", field="robots")
    specs = [s for s in suite if s.id in set(robots)]
    if len(specs) != len(robots):
        raise ConfigError("every training robot must be part of the suite", field="robots")

    if groups is None:
        groups = resolve_groups(config, specs, fgw)
    if groups is not None:
        if set(groups.mapping) != set(robots):
            raise ConfigError("group assignment must cover exactly the training robots", field="groups")
        logger.info("Training %s with %d groups: %s", config.algorithm, groups.m, groups.groups())

    d_max = max(s.n_joints for s in suite)
    state = state or init_state(config, d_max, latent)
    total = updates or config.updates
    cadence = eval_every or config.resolved_eval_every
    command = COMMANDS[dataset.manifest.direction]
    result = TrainingResult(state=state, groups=groups)

    window: Dict[str, List[float]] = defaultdict(list)
    for k in range(1, total + 1):
        state = train_iteration(state, dataset, robots, groups)
        for name, value in state.last_losses.items():
            window[name].append(value)
        if on_iteration is not None:
            on_iteration(state)
        if k % cadence == 0 or k == total:
            returns = evaluate_policy(state, specs, command, env)
            losses = {f"{name}_loss": float(np.mean(values)) for name, values in window.items()}
            window.clear()
            for robot, value in returns.items():
                result.evaluations.append({"step": state.step, "robot": robot, "return": value})
                result.log.append(
                    {
                        "step": state.step,
                        "algorithm": config.algorithm,
                        "group": "" if groups is None else groups.mapping[robot],
                        **losses,
                        "robot": robot,
                        "return": value,
                    }
                )
            logger.info("step %d mean return %.3f %s", state.step, float(np.mean(list(returns.values()))), losses)
    result.state = state
    return result


@dataclass
class FinetuneCurves:
    held_out: str
    pretrained: List[Tuple[int, float]]
    scratch: List[Tuple[int, float]]


def pretrain_finetune(
    config: TrainConfig,
    suite: Sequence[EmbodimentSpec],
    dataset: Dataset,
    held_out: str,
    latent: LatentConfig = LatentConfig(),
    env: EnvSettings = EnvSettings(),
    fgw: FGWSettings = FGWSettings(),
) -> FinetuneCurves:
    """Pre-train without `held_out`, then fine-tune on it from pre-trained and fresh parameters.

    Fine-tuning keeps the pre-trained parameters and targets, resets the
    optimizer moments, and trains ungrouped for config.finetune_updates.
    """
    ids = sorted(s.id for s in suite)
    if held_out not in ids:
        raise ConfigError(f"held-out robot '{held_out}' is not in the suite", field="held_out")
    others = [r for r in dataset.robots if r != held_out]
    if not others:
        raise ConfigError("pre-training needs at least one robot besides the held-out one", field="held_out")

    phase1 = run_training(config, suite, dataset, robots=others, latent=latent, env=env, fgw=fgw)

    ft_config = config.model_copy(
        update={"grouping": "none", "conflict_resolver": "none", "normalized_mode": False, "critic_grouping": False}
    )
    ft_updates = config.resolved_finetune_updates
    cadence = max(1, ft_updates // 20)
    d_max = max(s.n_joints for s in suite)

    trained = phase1.state
    warm = init_state(ft_config, d_max, latent, models=trained.models)
    warm = replace(
        warm,
        policy=trained.policy,
        value=trained.value,
        q=trained.q,
        target_q=trained.target_q,
        target_policy=trained.target_policy,
    )
    fresh = init_state(ft_config, d_max, latent)

    curves = []
    for start in (warm, fresh):
        run = run_training(
            ft_config, suite, dataset, robots=[held_out], latent=latent, env=env,
            state=start, updates=ft_updates, eval_every=cadence,
        )
        curves.append(run.curve(held_out))
    return FinetuneCurves(held_out=held_out, pretrained=curves[0], scratch=curves[1])


CHECKPOINT_PARTS = ("policy", "value", "q", "target_q", "target_policy")


def save_checkpoint(state: TrainerState, out_dir: Union[str, Path]) -> Path:
    """Write every parameter vector plus the model manifest under out_dir."""
    out_dir = Path(out_dir)
    for part in CHECKPOINT_PARTS:
        save_params(getattr(state, part), out_dir / part, extra={"step": state.step})
    save_model_manifest(state.models, out_dir / "model.json")
    return out_dir


def load_checkpoint(state: TrainerState, out_dir: Union[str, Path]) -> TrainerState:
    """Replace the parameters of a freshly initialized state with saved ones.

    Raises:
        LayoutError: If a saved vector does not match the state's layout.
    """
    out_dir = Path(out_dir)
    loaded = {part: load_params(out_dir / part) for part in CHECKPOINT_PARTS}
    for part, params in loaded.items():
        if params.layout != getattr(state, part).layout:
            raise LayoutError(f"checkpoint {part} layout does not match the model")
    return replace(state, **loaded)
