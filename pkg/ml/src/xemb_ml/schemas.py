"""
Pydantic contract types shared by the xemb_ml services.

These models define everything that is user supplied or crosses a file
boundary (suite manifests, dataset manifests, group assignments, model and
training configuration), so validation happens once at the edge.
"""
from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Family = Literal["quadruped-like", "biped-like", "hexapod-like"]
Direction = Literal["forward", "backward"]
Variant = Literal["expert", "replay", "mixture"]
Algorithm = Literal["bc", "iql", "td3bc"]
Grouping = Literal["none", "eg", "random", "heuristic"]
Resolver = Literal["none", "pcgrad"]

# Allowed (joints, feet) per family tag.
FAMILY_SHAPES: Dict[str, Dict[str, set]] = {
    "quadruped-like": {"joints": {4, 8}, "feet": {4}},
    "biped-like": {"joints": {2, 4, 6}, "feet": {2}},
    "hexapod-like": {"joints": {6}, "feet": {6}},
}


class EnvSettings(BaseModel):
    """LinkChain simulation constants."""
    model_config = ConfigDict(frozen=True)

    dt: float = Field(0.05, gt=0.0, description="Integration step in seconds")
    horizon: int = Field(200, ge=1, description="Episode length in steps")
    kp: float = Field(4.0, gt=0.0, description="Scripted controller velocity gain")
    a_max: float = Field(5.0, gt=0.0, description="Torque clip")
    track_width: float = Field(0.25, gt=0.0, description="Velocity tracking kernel width")
    transient: int = Field(50, ge=0, description="Steps ignored by the expert tracking oracle")
    tracking_tolerance: float = Field(0.05, gt=0.0, description="Expert oracle bound on mean |v - c|")


class EmbodimentSpec(BaseModel):
    """One synthetic robot: structure, per-joint dynamics and reward weights."""
    model_config = ConfigDict(frozen=True)

    id: str = Field(..., description="Stable embodiment identifier")
    family: Family = Field(..., description="Morphology family tag")
    n_joints: int = Field(..., ge=2, le=8)
    n_feet: int = Field(..., ge=1)
    coupling: List[float] = Field(..., description="Per-joint contribution w_j to base velocity")
    gear: List[float] = Field(..., description="Per-joint torque gain")
    damping: List[float] = Field(..., description="Per-joint viscous damping")
    stiffness: List[float] = Field(..., description="Per-joint spring stiffness")
    q_limit: List[float] = Field(..., description="Per-joint position limit (rad)")
    limbs: List[List[int]] = Field(..., description="Joint-index chains from torso to foot")
    foot_joints: List[int] = Field(..., description="Terminal joint index per foot")
    k_track: float = Field(..., ge=0.0)
    k_torque: float = Field(..., ge=0.0)
    k_rate: float = Field(..., ge=0.0)

    @model_validator(mode="after")
    def _check_structure(self) -> "EmbodimentSpec":
        j = self.n_joints
        for name in ("coupling", "gear", "damping", "stiffness", "q_limit"):
            if len(getattr(self, name)) != j:
                raise ValueError(f"{name} must have {j} entries")
        if sum(w * w for w in self.coupling) <= 0.0:
            raise ValueError("coupling must have nonzero energy")
        if min(self.gear) <= 0 or min(self.damping) <= 0 or min(self.q_limit) <= 0:
            raise ValueError("gear, damping and q_limit must be positive")
        if min(self.stiffness) < 0:
            raise ValueError("stiffness must be non-negative")
        flat = sorted(idx for limb in self.limbs for idx in limb)
        if flat != list(range(j)) or any(not limb for limb in self.limbs):
            raise ValueError("limbs must partition the joint indices into nonempty chains")
        terminals = {limb[-1] for limb in self.limbs}
        if len(self.foot_joints) != self.n_feet or not set(self.foot_joints) <= terminals:
            raise ValueError("every foot must attach to a terminal joint")
        if not self.matches_family_shape():
            raise ValueError(f"{self.n_joints} joints and {self.n_feet} feet do not fit the {self.family} family")
        return self

    def matches_family_shape(self) -> bool:
        """True when (J, F) is one the suite generator uses for this family."""
        shapes = FAMILY_SHAPES[self.family]
        return self.n_joints in shapes["joints"] and self.n_feet in shapes["feet"]


class SuiteManifest(BaseModel):
    """Generated suite with expert reference scores."""

    seed: int
    env: EnvSettings = Field(default_factory=EnvSettings)
    specs: List[EmbodimentSpec]
    expert_scores: Dict[str, float] = Field(default_factory=dict, description="Expert return per id (forward)")


class SweepSettings(BaseModel):
    """Scripted controller sweep standing in for a behavior-policy training run."""
    model_config = ConfigDict(frozen=True)

    sweep_factor: int = Field(15, ge=1, description="Sweep episodes per dataset episode budget")
    ramp_fraction: float = Field(0.6, gt=0.0, le=1.0, description="Share of the sweep spent ramping")
    ramp_exponent: float = Field(0.7, gt=0.0)
    eta_start: float = 0.05
    eta_end: float = 1.0
    sigma_start: float = 0.8
    sigma_end: float = 0.05
    phase_boundary: float = Field(0.4, description="Gain separating early and late episodes")
    ma_window: int = Field(10, ge=1)
    replay_threshold: float = Field(0.9, gt=0.0, le=1.0)
    expert_noise: float = Field(0.05, ge=0.0)


class BlobInfo(BaseModel):
    file: str
    shape: List[int]
    crc32: int


class RobotEntry(BaseModel):
    transitions: int
    episodes: int
    blobs: Dict[str, BlobInfo]


class DatasetManifest(BaseModel):
    """Dataset variant metadata; counts must match shard contents exactly."""

    format_version: int = Field(1, description="On-disk layout version")
    variant: Variant
    direction: Direction
    mixture_fraction: float = Field(0.0, ge=0.0, le=1.0)
    steps_per_robot: int = Field(..., ge=1)
    seed: int
    counts: Dict[str, int] = Field(default_factory=dict)
    robots: Dict[str, RobotEntry] = Field(default_factory=dict)


class GroupAssignment(BaseModel):
    """Fixed robot -> group mapping for a whole training run."""
    model_config = ConfigDict(frozen=True)

    m: int = Field(..., ge=1)
    mapping: Dict[str, int]

    @model_validator(mode="after")
    def _check_groups(self) -> "GroupAssignment":
        used = set(self.mapping.values())
        if any(g < 0 or g >= self.m for g in used):
            raise ValueError(f"group indices must lie in [0, {self.m})")
        if used != set(range(self.m)):
            raise ValueError("every group must be nonempty")
        return self

    def groups(self) -> List[List[str]]:
        """Robot ids per group, each sorted, indexed by group."""
        out: List[List[str]] = [[] for _ in range(self.m)]
        for robot in sorted(self.mapping):
            out[self.mapping[robot]].append(robot)
        return out


class FGWSettings(BaseModel):
    """Fused Gromov-Wasserstein solver and clustering knobs."""
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(0.5, ge=0.0, le=1.0, description="Structure weight")
    epsilon: float = Field(1e-3, gt=0.0, description="Inner entropic regularization")
    max_iter: int = Field(200, ge=1)
    tol: float = Field(1e-9, gt=0.0, description="Relative objective tolerance")
    inner_max_iter: int = Field(1000, ge=1)
    inner_tol: float = Field(1e-9, gt=0.0)
    marginal_tol: float = Field(1e-2, gt=0.0, description="Inner solve marginal violation allowed before rounding")
    linkage: Literal["average", "complete", "single", "weighted"] = "average"


class LatentConfig(BaseModel):
    """Network widths and attention constants."""
    model_config = ConfigDict(frozen=True)

    latent_dim: int = Field(64, ge=1, description="L_d")
    attention_temperature: float = Field(1.0, gt=0.0)
    temperature_floor: float = Field(1e-6, ge=0.0)
    encoder_widths: List[int] = Field(default_factory=lambda: [64])
    core_widths: List[int] = Field(default_factory=lambda: [256, 128])
    value_widths: List[int] = Field(default_factory=lambda: [512, 256, 128])
    head_widths: List[int] = Field(default_factory=lambda: [64])
    descriptor_latent_dim: int = Field(32, ge=1, description="Width of g_omega output")
    action_latent_dim: int = Field(32, ge=1, description="L_a")
    action_encoder_widths: List[int] = Field(default_factory=lambda: [64])
    sigma_floor: float = Field(1e-4, gt=0.0)
    d_max: int = Field(8, ge=1, description="Max action length over the suite")

    @field_validator("encoder_widths", "core_widths", "value_widths", "head_widths", "action_encoder_widths")
    @classmethod
    def _positive_widths(cls, v: List[int]) -> List[int]:
        if any(w < 1 for w in v):
            raise ValueError("all widths must be >= 1")
        return v


class TrainConfig(BaseModel):
    """Training hyperparameters; defaults follow the published table at desk scale."""

    algorithm: Algorithm = "iql"
    grouping: Grouping = "none"
    m: int = Field(4, ge=1, description="Group count for grouped or normalized runs")
    conflict_resolver: Resolver = "none"
    critic_grouping: bool = Field(False, description="Also update the critic per group")
    normalized_mode: bool = False
    lr: float = Field(3e-4, gt=0.0)
    updates: int = Field(20_000, ge=1, description="Outer iterations K")
    per_robot_batch: int = Field(256, ge=1)
    gamma: float = 0.99
    expectile: float = 0.7
    beta: float = Field(3.0, ge=0.0, description="AWR temperature")
    tau_target: float = Field(0.005, gt=0.0, le=1.0)
    max_grad_norm: float = Field(0.5, gt=0.0)
    policy_freq: int = Field(2, ge=1)
    policy_noise: float = Field(0.2, ge=0.0)
    noise_clip: float = Field(0.5, ge=0.0)
    bc_weight: float = Field(2.5, ge=0.0)
    a_max: float = Field(5.0, gt=0.0)
    awr_weight_cap: float = Field(100.0, gt=0.0)
    eval_every: Optional[int] = Field(None, ge=1, description="Defaults to updates // 20")
    eval_episodes: int = Field(5, ge=1)
    finetune_updates: Optional[int] = Field(None, ge=1, description="Defaults to updates // 4")
    heads_only_grads: bool = Field(False, description="Restrict conflict gradients to actor heads")
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "TrainConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        if self.conflict_resolver == "pcgrad" and self.grouping != "none":
            raise ValueError("pcgrad combines per-robot gradients of the ungrouped trainer")
        if self.normalized_mode and self.grouping != "none":
            raise ValueError("normalized_mode is the ungrouped compute-matched baseline")
        if self.critic_grouping and self.grouping == "none":
            raise ValueError("critic_grouping requires a grouping")
        return self

    @property
    def resolved_eval_every(self) -> int:
        return self.eval_every or max(1, self.updates // 20)

    @property
    def resolved_finetune_updates(self) -> int:
        return self.finetune_updates or max(1, self.updates // 4)
