"""
Differentiable-computation substrate for the training and analysis services.

Responsibilities:
- Hold network parameters as flat float64 vectors with a named segment layout.
- Compute exact reverse-mode gradients of scalar losses (torch autograd).
- Apply one global-norm-clipped adaptive-moment (Adam) update as a pure function.
- Provide gradient utilities: cosine similarity and finite-difference checking.
- Persist parameter vectors as a JSON manifest plus one little-endian blob.

Notes:
- All tensors are float64 on CPU so bitwise-equality audits are meaningful.
- Operations never mutate their inputs; state is passed in and returned.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DegenerateGradient, LayoutError, NumericalError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DEGENERATE_NORM = 1e-12
PARAMS_FORMAT = "xemb-params"
PARAMS_VERSION = 1

Shape = Tuple[int, ...]
Layout = Tuple[Tuple[str, Shape], ...]
LossFn = Callable[[Dict[str, torch.Tensor]], torch.Tensor]


def _numel(shape: Shape) -> int:
    return int(math.prod(shape)) if shape else 1


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter vector with an ordered (name, shape) layout."""

    values: torch.Tensor
    layout: Layout

    def __post_init__(self) -> None:
        names = [name for name, _ in self.layout]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate segment names in layout: {names}")
        expected = sum(_numel(shape) for _, shape in self.layout)
        if self.values.ndim != 1 or self.values.numel() != expected:
            raise LayoutError(
                f"values of length {self.values.numel()} do not match layout size {expected}"
            )
        if self.values.dtype != DTYPE:
            raise LayoutError(f"values must be float64, got {self.values.dtype}")

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, torch.Tensor]) -> "ParamVector":
        """Flatten named tensors (in mapping order) into a vector."""
        layout = tuple((name, tuple(int(d) for d in t.shape)) for name, t in tensors.items())
        if tensors:
            values = torch.cat([t.detach().reshape(-1).to(DTYPE) for t in tensors.values()])
        else:
            values = torch.zeros(0, dtype=DTYPE)
        return cls(values.clone(), layout)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamVector":
        """Snapshot a module's parameters in registration order."""
        return cls.from_tensors(dict(module.named_parameters()))

    def unflatten(self, values: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        """Split a flat tensor into named views shaped by the layout.

        Args:
            values (Optional[torch.Tensor]): Flat tensor to split; defaults to own values.
                Passing a tensor that requires grad yields differentiable views.

        Returns:
            Dict[str, torch.Tensor]: Segment name to view.
        """
        source = self.values if values is None else values
        out: Dict[str, torch.Tensor] = {}
        offset = 0
        for name, shape in self.layout:
            n = _numel(shape)
            out[name] = source[offset:offset + n].view(shape)
            offset += n
        return out

    def offsets(self) -> Dict[str, Tuple[int, int]]:
        """Return (start, stop) indices per segment."""
        out: Dict[str, Tuple[int, int]] = {}
        offset = 0
        for name, shape in self.layout:
            n = _numel(shape)
            out[name] = (offset, offset + n)
            offset += n
        return out

    def segment(self, name: str) -> torch.Tensor:
        return self.unflatten()[name]

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(values.detach().to(DTYPE).clone(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(torch.zeros_like(self.values), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values))

    def select(self, prefixes: Sequence[str]) -> "ParamVector":
        """Sub-vector made of the segments whose names start with any prefix."""
        views = self.unflatten()
        picked = {name: views[name] for name, _ in self.layout if name.startswith(tuple(prefixes))}
        return ParamVector.from_tensors(picked)

    def digest(self) -> str:
        """SHA-256 over the little-endian blob and layout; equal digests mean bit-identical."""
        h = hashlib.sha256(json.dumps([[n, list(s)] for n, s in self.layout]).encode())
        h.update(self.values.detach().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def segment_digests(self) -> Dict[str, str]:
        return {
            name: hashlib.sha256(view.detach().numpy().astype("<f8").tobytes()).hexdigest()
            for name, view in self.unflatten().items()
        }

    def __len__(self) -> int:
        return int(self.values.numel())


@dataclass(frozen=True, eq=False)
class OptimState:
    """Adam moments and hyperparameters tracking one ParamVector layout."""

    layout: Layout
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(
        cls,
        params: ParamVector,
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "OptimState":
        zeros = torch.zeros_like(params.values)
        return cls(params.layout, zeros, zeros.clone(), 0, lr, beta1, beta2, eps)


@dataclass(frozen=True)
class GradReport:
    """Loss value with its gradient and gradient norm."""

    loss: float
    grad: ParamVector
    grad_norm: float


def _nonfinite_segment(params: ParamVector, values: torch.Tensor) -> Optional[str]:
    for name, view in params.unflatten(values).items():
        if not bool(torch.isfinite(view).all()):
            return name
    return None


def grad_of(loss_fn: LossFn, params: ParamVector) -> GradReport:
    """Evaluate a scalar loss and its exact reverse-mode gradient.

    Args:
        loss_fn (LossFn): Maps named parameter views to a scalar tensor.
        params (ParamVector): Point of evaluation.

    Returns:
        GradReport: Loss, gradient vector and its Euclidean norm.

    Raises:
        NumericalError: If the loss or any gradient segment is non-finite.
    """
    values = params.values.detach().clone().requires_grad_(True)
    loss = loss_fn(params.unflatten(values))
    loss = torch.as_tensor(loss, dtype=DTYPE)
    if loss.numel() != 1:
        raise NumericalError(f"loss must be scalar, got shape {tuple(loss.shape)}", segment="loss")
    if not bool(torch.isfinite(loss)):
        raise NumericalError("non-finite loss", segment="loss")

    if loss.requires_grad:
        (grad,) = torch.autograd.grad(loss, values, allow_unused=True)
        grad = torch.zeros_like(values) if grad is None else grad.detach()
    else:
        grad = torch.zeros_like(values).detach()

    bad = _nonfinite_segment(params, grad)
    if bad is not None:
        raise NumericalError("non-finite gradient", segment=bad)

    return GradReport(
        loss=float(loss.detach()),
        grad=ParamVector(grad.clone(), params.layout),
        grad_norm=float(torch.linalg.vector_norm(grad)),
    )


def optim_step(
    params: ParamVector,
    grad: ParamVector,
    state: OptimState,
    max_grad_norm: Optional[float] = 0.5,
) -> Tuple[ParamVector, OptimState]:
    """Clip the gradient by global norm and apply one Adam update.

    Args:
        params (ParamVector): Current parameters.
        grad (ParamVector): Gradient at params.
        state (OptimState): Adam state for this layout.
        max_grad_norm (Optional[float]): Global-norm clip; None or <=0 disables.

    Returns:
        Tuple[ParamVector, OptimState]: Updated parameters and state.

    Raises:
        LayoutError: If params, grad and state layouts disagree.
    """
    if params.layout != grad.layout or params.layout != state.layout:
        raise LayoutError("params, grad and optimizer state layouts differ")

    param = nn.Parameter(params.values.detach().clone())
    param.grad = grad.values.detach().clone()
    if max_grad_norm is not None and max_grad_norm > 0:
        nn.utils.clip_grad_norm_([param], max_norm=max_grad_norm, foreach=False)

    optimizer = torch.optim.Adam(
        [param],
        lr=state.lr,
        betas=(state.beta1, state.beta2),
        eps=state.eps,
        foreach=False,
    )
    if state.step_count > 0:
        optimizer.state[param] = {
            "step": torch.tensor(float(state.step_count), dtype=DTYPE),
            "exp_avg": state.first_moment.clone(),
            "exp_avg_sq": state.second_moment.clone(),
        }
    optimizer.step()

    slot = optimizer.state[param]
    new_state = OptimState(
        layout=state.layout,
        first_moment=slot["exp_avg"].detach().clone(),
        second_moment=slot["exp_avg_sq"].detach().clone(),
        step_count=state.step_count + 1,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return ParamVector(param.detach().clone(), params.layout), new_state


def ema(target: ParamVector, source: ParamVector, tau: float) -> ParamVector:
    """Exponential moving average target <- (1 - tau) * target + tau * source."""
    if not target.same_layout(source):
        raise LayoutError("target and source layouts differ")
    return ParamVector((1.0 - tau) * target.values + tau * source.values, target.layout)


def cosine(g1: ParamVector, g2: ParamVector) -> float:
    """Cosine similarity of two gradients, clamped to [-1, 1].

    Raises:
        LayoutError: If layouts differ.
        DegenerateGradient: If either norm is below 1e-12.
    """
    if not g1.same_layout(g2):
        raise LayoutError("cosine of vectors with different layouts")
    n1 = torch.linalg.vector_norm(g1.values)
    n2 = torch.linalg.vector_norm(g2.values)
    if float(n1) < DEGENERATE_NORM or float(n2) < DEGENERATE_NORM:
        raise DegenerateGradient(f"gradient norm below {DEGENERATE_NORM}: {float(n1):.3e}, {float(n2):.3e}")
    value = torch.dot(g1.values, g2.values) / (n1 * n2)
    return float(torch.clamp(value, -1.0, 1.0))


def _evaluate(loss_fn: LossFn, params: ParamVector, values: torch.Tensor) -> float:
    with torch.no_grad():
        value = float(torch.as_tensor(loss_fn(params.unflatten(values)), dtype=DTYPE))
    if not math.isfinite(value):
        raise NumericalError("non-finite loss during finite differencing", segment="loss")
    return value


def finite_diff_check(
    loss_fn: LossFn,
    params: ParamVector,
    step: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """Worst relative error between autograd and central differences.

    Args:
        loss_fn (LossFn): Scalar loss of named parameter views.
        params (ParamVector): Point of evaluation.
        step (float): Central-difference step in (0, 1e-2].
        coords (Optional[Iterable[int]]): Coordinates to check; all by default.

    Returns:
        float: max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < step <= 1e-2:
        raise ConfigError(f"finite-difference step must be in (0, 1e-2], got {step}", field="step")

    analytic = grad_of(loss_fn, params).grad.values
    base = params.values.detach().clone()
    indices = range(len(params)) if coords is None else coords

    worst = 0.0
    for i in indices:
        plus = base.clone()
        plus[i] += step
        minus = base.clone()
        minus[i] -= step
        numeric = (_evaluate(loss_fn, params, plus) - _evaluate(loss_fn, params, minus)) / (2.0 * step)
        a = float(analytic[i])
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def _checkpoint_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    stem = Path(path)
    if stem.suffix in {".json", ".bin"}:
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_params(params: ParamVector, path: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    """Write `<stem>.json` (segments with byte offsets) and `<stem>.bin` (raw <f8 blob).

    Args:
        params (ParamVector): Vector to persist.
        path (Union[str, Path]): Stem path; suffix is replaced.
        extra (Optional[Dict]): Additional manifest entries (e.g. model config).

    Returns:
        Path: Manifest path.
    """
    manifest_path, blob_path = _checkpoint_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    segments = []
    for name, shape in params.layout:
        start, _ = params.offsets()[name]
        segments.append({"name": name, "shape": list(shape), "offset": start * 8})
    manifest = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "dtype": "<f8",
        "nbytes": len(params) * 8,
        "blob": blob_path.name,
        "segments": segments,
    }
    if extra:
        manifest["extra"] = extra

    blob_path.write_bytes(params.values.detach().numpy().astype("<f8").tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_params(path: Union[str, Path]) -> ParamVector:
    """Read a vector written by save_params.

    Raises:
        LayoutError: If the manifest and blob disagree.
    """
    manifest_path, blob_path = _checkpoint_paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != PARAMS_FORMAT:
        raise LayoutError(f"not a parameter checkpoint: {manifest_path}")
    raw = blob_path.read_bytes()
    if len(raw) != manifest["nbytes"]:
        raise LayoutError(f"blob has {len(raw)} bytes, manifest expects {manifest['nbytes']}")

    layout = tuple((s["name"], tuple(s["shape"])) for s in manifest["segments"])
    values = torch.from_numpy(np.frombuffer(raw, dtype="<f8").astype(np.float64).copy())
    pv = ParamVector(values, layout)
    for s in manifest["segments"]:
        if pv.offsets()[s["name"]][0] * 8 != s["offset"]:
            raise LayoutError(f"segment {s['name']} offset mismatch")
    return pv
