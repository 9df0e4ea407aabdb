"""
Morphology-conditioned networks for a variable number of joints and feet.

Responsibilities:
- Encode factorized observations with descriptor-gated attention: each latent
  dimension is a softmax over joints (or feet) of a descriptor MLP, weighting an
  observation MLP; sums over the set give a fixed-size latent.
- Decode a per-joint Gaussian policy, a state value and a twin state-action value
  (actions zero-padded to d_max).
- Evaluate every network as a pure function of a flat ParamVector.

Notes:
- Joints and feet are processed in canonical descriptor order and per-joint
  outputs are returned in the caller's order, so shuffling a set (with its
  descriptors) leaves every output bit-identical.
- The policy, value and twin-Q networks each carry their own encoder copy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.distributions import Normal
from torch.func import functional_call
from torch.nn import functional as F

from .errors import ShapeError
from .linkchain_service import (
    FOOT_DESC_DIM,
    FOOT_OBS_DIM,
    GENERAL_OBS_DIM,
    JOINT_DESC_DIM,
    JOINT_OBS_DIM,
    ObsBundle,
)
from .numerics_service import DTYPE, ParamVector
from .schemas import LatentConfig

Params = Dict[str, torch.Tensor]

# Segments the actor-head-only gradient flag keeps.
ACTOR_HEAD_PREFIXES = ("heads.",)


def mlp(in_dim: int, widths: Sequence[int], out_dim: Optional[int] = None) -> nn.Sequential:
    """Tanh MLP; a final linear layer to out_dim is appended when given."""
    layers: List[nn.Module] = []
    prev = in_dim
    for width in widths:
        layers += [nn.Linear(prev, width), nn.Tanh()]
        prev = width
    if out_dim is not None:
        layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


@dataclass(frozen=True)
class ObsTensors:
    """Batched observation of one robot; descriptors are shared by the batch."""

    o_g: torch.Tensor  # (B, 3)
    o_j: torch.Tensor  # (B, J, 3)
    o_f: torch.Tensor  # (B, F, 2)
    d_j: torch.Tensor  # (J, 4)
    d_f: torch.Tensor  # (F, 2)

    @classmethod
    def from_arrays(cls, o_g, o_j, o_f, d_j, d_f) -> "ObsTensors":
        as_t = lambda x: torch.as_tensor(np.asarray(x), dtype=DTYPE)
        return cls(as_t(o_g), as_t(o_j), as_t(o_f), as_t(d_j), as_t(d_f))

    @classmethod
    def from_bundle(cls, obs: ObsBundle) -> "ObsTensors":
        return cls.from_arrays(obs.o_g[None], obs.o_j[None], obs.o_f[None], obs.d_j, obs.d_f)

    @classmethod
    def from_batch(cls, batch, next_obs: bool = False) -> "ObsTensors":
        prefix = "next_" if next_obs else ""
        return cls.from_arrays(
            getattr(batch, prefix + "o_g"),
            getattr(batch, prefix + "o_j"),
            getattr(batch, prefix + "o_f"),
            batch.d_j,
            batch.d_f,
        )

    @property
    def n_joints(self) -> int:
        return int(self.d_j.shape[0])

    def check(self) -> None:
        b = self.o_g.shape[0]
        if self.o_g.shape != (b, GENERAL_OBS_DIM):
            raise ShapeError(f"o_g must be (B, {GENERAL_OBS_DIM}), got {tuple(self.o_g.shape)}")
        if self.o_j.shape != (b, self.d_j.shape[0], JOINT_OBS_DIM) or self.d_j.shape[1:] != (JOINT_DESC_DIM,):
            raise ShapeError(f"joint set mismatch: o_j {tuple(self.o_j.shape)} vs d_j {tuple(self.d_j.shape)}")
        if self.o_f.shape != (b, self.d_f.shape[0], FOOT_OBS_DIM) or self.d_f.shape[1:] != (FOOT_DESC_DIM,):
            raise ShapeError(f"foot set mismatch: o_f {tuple(self.o_f.shape)} vs d_f {tuple(self.d_f.shape)}")


def canonical_order(descriptors: torch.Tensor) -> torch.Tensor:
    """Permutation sorting descriptor rows lexicographically."""
    rows = descriptors.detach().cpu().numpy()
    order = np.lexsort(rows.T[::-1]) if rows.size else np.arange(rows.shape[0])
    return torch.as_tensor(order, dtype=torch.long)


class SetAttention(nn.Module):
    """z_k = softmax_k(f_phi(d_k) / (temp + eps)) * f_psi(o_k), per latent dimension."""

    def __init__(self, desc_dim: int, obs_dim: int, widths: Sequence[int], latent: int, temperature: float) -> None:
        super().__init__()
        self.desc = mlp(desc_dim, widths, latent)
        self.obs = mlp(obs_dim, widths, latent)
        self.temperature = temperature

    def forward(self, obs: torch.Tensor, desc: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        order = canonical_order(desc)
        inverse = torch.argsort(order)
        gate = torch.softmax(self.desc(desc[order]) / self.temperature, dim=0)
        z = gate.unsqueeze(0) * self.obs(obs[:, order])
        return z.sum(dim=1), z[:, inverse]


class URMAEncoder(nn.Module):
    def __init__(self, config: LatentConfig) -> None:
        super().__init__()
        temperature = config.attention_temperature + config.temperature_floor
        self.joints = SetAttention(JOINT_DESC_DIM, JOINT_OBS_DIM, config.encoder_widths, config.latent_dim, temperature)
        self.feet = SetAttention(FOOT_DESC_DIM, FOOT_OBS_DIM, config.encoder_widths, config.latent_dim, temperature)
        self.output_dim = GENERAL_OBS_DIM + 2 * config.latent_dim

    def forward(self, obs: ObsTensors) -> Tuple[torch.Tensor, torch.Tensor]:
        obs.check()
        joint_sum, z_j = self.joints(obs.o_j, obs.d_j)
        foot_sum, _ = self.feet(obs.o_f, obs.d_f)
        return torch.cat([obs.o_g, joint_sum, foot_sum], dim=-1), z_j


class GaussianHeads(nn.Module):
    """Core h_theta, descriptor encoder g_omega and per-joint heads mu_nu, sigma_nu."""

    def __init__(self, config: LatentConfig, encoder_dim: int) -> None:
        super().__init__()
        self.core = mlp(encoder_dim, config.core_widths)
        core_out = config.core_widths[-1] if config.core_widths else encoder_dim
        self.action_desc = mlp(JOINT_DESC_DIM, config.head_widths, config.descriptor_latent_dim)
        self.mu_head = mlp(config.descriptor_latent_dim + core_out + config.latent_dim, config.head_widths, 1)
        self.sigma_head = mlp(config.descriptor_latent_dim, config.head_widths, 1)
        self.sigma_floor = config.sigma_floor

    def forward(self, z_bar: torch.Tensor, z_j: torch.Tensor, d_j: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, joints = z_j.shape[0], z_j.shape[1]
        if d_j.shape[0] != joints:
            raise ShapeError(f"{joints} joint latents but {d_j.shape[0]} descriptors")
        z_action = self.core(z_bar)
        d_a = self.action_desc(d_j)
        mu_in = torch.cat(
            [
                d_a.unsqueeze(0).expand(batch, -1, -1),
                z_action.unsqueeze(1).expand(-1, joints, -1),
                z_j,
            ],
            dim=-1,
        )
        mu = self.mu_head(mu_in).squeeze(-1)
        sigma = F.softplus(self.sigma_head(d_a).squeeze(-1)) + self.sigma_floor
        return mu, sigma.unsqueeze(0).expand(batch, -1)


class TwinQHeads(nn.Module):
    """Action encoder f_a over the zero-padded action and two independent Q heads."""

    def __init__(self, config: LatentConfig, encoder_dim: int) -> None:
        super().__init__()
        self.action_encoder = mlp(config.d_max, config.action_encoder_widths, config.action_latent_dim)
        in_dim = encoder_dim + config.action_latent_dim
        self.q1 = mlp(in_dim, config.value_widths, 1)
        self.q2 = mlp(in_dim, config.value_widths, 1)

    def forward(self, z_bar: torch.Tensor, padded: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([z_bar, self.action_encoder(padded)], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


class PolicyNet(nn.Module):
    def __init__(self, config: LatentConfig) -> None:
        super().__init__()
        self.encoder = URMAEncoder(config)
        self.heads = GaussianHeads(config, self.encoder.output_dim)

    def forward(self, obs: ObsTensors) -> Tuple[torch.Tensor, torch.Tensor]:
        z_bar, z_j = self.encoder(obs)
        return self.heads(z_bar, z_j, obs.d_j)


class ValueNet(nn.Module):
    def __init__(self, config: LatentConfig) -> None:
        super().__init__()
        self.encoder = URMAEncoder(config)
        self.v = mlp(self.encoder.output_dim, config.value_widths, 1)

    def forward(self, obs: ObsTensors) -> torch.Tensor:
        z_bar, _ = self.encoder(obs)
        return self.v(z_bar).squeeze(-1)


class TwinQNet(nn.Module):
    def __init__(self, config: LatentConfig) -> None:
        super().__init__()
        self.encoder = URMAEncoder(config)
        self.heads = TwinQHeads(config, self.encoder.output_dim)
        self.d_max = config.d_max

    def forward(self, obs: ObsTensors, actions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z_bar, _ = self.encoder(obs)
        return self.heads(z_bar, pad_actions(actions, self.d_max))


def pad_actions(actions: torch.Tensor, d_max: int) -> torch.Tensor:
    """Zero-pad the last dimension to d_max.

    Raises:
        ShapeError: If the action is longer than d_max.
    """
    joints = actions.shape[-1]
    if joints > d_max:
        raise ShapeError(f"action of length {joints} exceeds d_max={d_max}")
    return F.pad(actions, (0, d_max - joints))


@dataclass(frozen=True)
class ModelBundle:
    """Network templates plus their initial parameters."""

    config: LatentConfig
    policy: PolicyNet
    value: ValueNet
    qnet: TwinQNet
    policy_params: ParamVector
    value_params: ParamVector
    q_params: ParamVector

    @property
    def d_max(self) -> int:
        return self.config.d_max


def build_models(config: LatentConfig, d_max: int, seed: int) -> ModelBundle:
    """Instantiate all networks in float64 under a forked, seeded torch RNG.

    Args:
        config (LatentConfig): Widths and attention constants.
        d_max (int): Longest action over the suite; overrides config.d_max.
        seed (int): Initialization seed.

    Returns:
        ModelBundle: Templates and initial ParamVectors for policy, value and twin Q.
    """
    config = config.model_copy(update={"d_max": d_max})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        policy = PolicyNet(config).to(DTYPE)
        value = ValueNet(config).to(DTYPE)
        qnet = TwinQNet(config).to(DTYPE)
    for net in (policy, value, qnet):
        net.requires_grad_(False)
    return ModelBundle(
        config=config,
        policy=policy,
        value=value,
        qnet=qnet,
        policy_params=ParamVector.from_module(policy),
        value_params=ParamVector.from_module(value),
        q_params=ParamVector.from_module(qnet),
    )


def _sub(params: Params, prefix: str) -> Params:
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


def encode(net: nn.Module, params: Params, obs: ObsTensors) -> Tuple[torch.Tensor, torch.Tensor]:
    """(z_bar, z_j) from the encoder inside `net` evaluated at `params`."""
    return functional_call(net.encoder, _sub(params, "encoder."), (obs,))


def actor_forward(
    policy: PolicyNet, params: Params, z_bar: torch.Tensor, z_j: torch.Tensor, d_j: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-joint (mu, sigma), each shaped (B, J); sigma depends on d_j only."""
    return functional_call(policy.heads, _sub(params, "heads."), (z_bar, z_j, d_j))


def policy_forward(policy: PolicyNet, params: Params, obs: ObsTensors) -> Tuple[torch.Tensor, torch.Tensor]:
    return functional_call(policy, params, (obs,))


def log_prob(policy: PolicyNet, params: Params, obs: ObsTensors, actions: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log-density of `actions` (B, J), summed over joints."""
    mu, sigma = policy_forward(policy, params, obs)
    if actions.shape != mu.shape:
        raise ShapeError(f"actions {tuple(actions.shape)} do not match policy output {tuple(mu.shape)}")
    return Normal(mu, sigma).log_prob(actions).sum(dim=-1)


def deterministic_action(policy: PolicyNet, params: Params, obs: ObsTensors, a_max: float) -> torch.Tensor:
    mu, _ = policy_forward(policy, params, obs)
    return mu.clamp(-a_max, a_max)


def v_forward(value: ValueNet, params: Params, z_bar: torch.Tensor) -> torch.Tensor:
    return functional_call(value.v, _sub(params, "v."), (z_bar,)).squeeze(-1)


def state_value(value: ValueNet, params: Params, obs: ObsTensors) -> torch.Tensor:
    return functional_call(value, params, (obs,))


def q_forward(
    qnet: TwinQNet, params: Params, z_bar: torch.Tensor, actions: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(q1, q2) for per-joint actions, zero-padded to d_max before f_a."""
    return functional_call(qnet.heads, _sub(params, "heads."), (z_bar, pad_actions(actions, qnet.d_max)))


def state_action_value(
    qnet: TwinQNet, params: Params, obs: ObsTensors, actions: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    return functional_call(qnet, params, (obs, actions))


def make_policy(bundle: ModelBundle, params: ParamVector, a_max: float):
    """Deterministic numpy policy for environment rollouts."""
    views = params.unflatten()

    def policy(obs: ObsBundle) -> np.ndarray:
        with torch.no_grad():
            action = deterministic_action(bundle.policy, views, ObsTensors.from_bundle(obs), a_max)
        return action[0].numpy()

    return policy


def save_model_manifest(bundle: ModelBundle, path: Union[str, Path]) -> Path:
    """Record LatentConfig and d_max next to checkpoints."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"latent": bundle.config.model_dump(), "d_max": bundle.d_max}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_model_manifest(path: Union[str, Path]) -> LatentConfig:
    payload = json.loads(Path(path).read_text())
    return LatentConfig.model_validate({**payload["latent"], "d_max": payload["d_max"]})
