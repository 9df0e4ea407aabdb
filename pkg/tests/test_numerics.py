"""
Test the flat parameter vector, gradients, Adam steps and checkpoints.

Covers layout checks, closed-form gradients, clipping, cosine similarity,
finite-difference agreement and byte-exact persistence.
"""
import math

import pytest
import torch

from xemb_ml.errors import ConfigError, DegenerateGradient, LayoutError, NumericalError
from xemb_ml.numerics_service import (
    OptimState,
    ParamVector,
    cosine,
    ema,
    finite_diff_check,
    grad_of,
    load_params,
    optim_step,
    save_params,
)


def vec(*values, name="p"):
    return ParamVector.from_tensors({name: torch.tensor(values, dtype=torch.float64)})


def quadratic(views):
    return 0.5 * (views["p"] ** 2).sum()


def test_layout_must_match_values():
    """A value tensor of the wrong length is rejected."""
    with pytest.raises(LayoutError):
        ParamVector(torch.zeros(3, dtype=torch.float64), (("a", (2,)),))


def test_unflatten_round_trip():
    """Named tensors come back unchanged from flatten/unflatten."""
    tensors = {"w": torch.arange(6, dtype=torch.float64).view(2, 3), "b": torch.tensor([7.0], dtype=torch.float64)}
    params = ParamVector.from_tensors(tensors)
    views = params.unflatten()
    assert len(params) == 7
    assert torch.equal(views["w"], tensors["w"])
    assert torch.equal(views["b"], tensors["b"])
    assert params.offsets() == {"w": (0, 6), "b": (6, 7)}


def test_quadratic_gradient():
    """0.5 |p|^2 at (3, 4) has loss 12.5 and gradient (3, 4)."""
    report = grad_of(quadratic, vec(3.0, 4.0))
    assert report.loss == pytest.approx(12.5)
    assert torch.allclose(report.grad.values, torch.tensor([3.0, 4.0], dtype=torch.float64))
    assert report.grad_norm == pytest.approx(5.0)


def test_constant_loss_has_zero_gradient():
    """A loss that ignores the parameters yields a zero gradient."""
    report = grad_of(lambda views: torch.tensor(2.0, dtype=torch.float64), vec(1.0, -1.0))
    assert report.loss == 2.0
    assert torch.count_nonzero(report.grad.values) == 0


def test_nonfinite_gradient_names_segment():
    """NaN gradients are reported with the offending segment."""
    params = ParamVector.from_tensors(
        {"ok": torch.ones(2, dtype=torch.float64), "bad": torch.zeros(1, dtype=torch.float64)}
    )

    def loss(views):
        return views["ok"].sum() + views["bad"].abs().sqrt().sum()

    with pytest.raises(NumericalError) as info:
        grad_of(loss, params)
    assert info.value.segment == "bad"


def test_zero_gradient_leaves_params():
    """Adam with a zero gradient keeps the parameters and advances the step count."""
    params = vec(1.0, 2.0)
    state = OptimState.init(params)
    new_params, new_state = optim_step(params, params.zeros_like(), state)
    assert torch.equal(new_params.values, params.values)
    assert new_state.step_count == 1


def test_clipping_scales_gradient_before_moments():
    """A norm-5 gradient clipped to 0.5 enters the first moment scaled by 0.1."""
    params = vec(0.0, 0.0)
    grad = vec(3.0, 4.0)
    _, state = optim_step(params, grad, OptimState.init(params), max_grad_norm=0.5)
    expected = (1.0 - state.beta1) * 0.1 * grad.values
    assert torch.allclose(state.first_moment, expected, atol=1e-9)


def run_adam(lr, steps=200):
    params = vec(0.0)
    state = OptimState.init(params, lr=lr)
    loss = lambda views: 0.5 * ((views["p"] - 1.0) ** 2).sum()
    distances = [1.0]
    for _ in range(steps):
        report = grad_of(loss, params)
        params, state = optim_step(params, report.grad, state)
        distances.append(abs(float(params.values[0]) - 1.0))
    return distances


def test_adam_converges_monotonically():
    """At the default lr 3e-4, 200 steps on 0.5 (p - 1)^2 shrink |p - 1| at every step."""
    distances = run_adam(3e-4)
    assert all(b < a for a, b in zip(distances, distances[1:]))
    assert distances[-1] == pytest.approx(1.0 - 200 * 3e-4, abs=5e-3)


def test_adam_halves_distance_at_larger_lr():
    """With lr 3e-3 the same 200 steps remove more than half of |p - 1|."""
    distances = run_adam(3e-3)
    assert all(b < a for a, b in zip(distances, distances[1:]))
    assert distances[-1] < 0.5


def test_optim_step_layout_mismatch():
    """Params and gradient with different layouts are refused."""
    params = vec(1.0, 2.0)
    with pytest.raises(LayoutError):
        optim_step(params, vec(1.0, 2.0, name="q"), OptimState.init(params))


def test_ema_update():
    """EMA moves the target by tau toward the source."""
    target = ema(vec(0.0, 10.0), vec(1.0, 0.0), 0.25)
    assert torch.allclose(target.values, torch.tensor([0.25, 7.5], dtype=torch.float64))


def test_cosine_values():
    """Closed-form cosines, sign flip and scale invariance."""
    assert cosine(vec(1.0, 0.0), vec(1.0, 1.0)) == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)
    assert cosine(vec(2.0, -1.0), vec(-2.0, 1.0)) == pytest.approx(-1.0)
    assert cosine(vec(2.0, -1.0), vec(2.0, -1.0)) == pytest.approx(1.0)
    assert cosine(vec(1.0, 3.0), vec(2.0, 1.0)) == pytest.approx(cosine(vec(10.0, 30.0), vec(0.2, 0.1)))


def test_cosine_degenerate():
    """A zero vector has no direction."""
    with pytest.raises(DegenerateGradient):
        cosine(vec(0.0, 0.0), vec(1.0, 0.0))


def test_finite_difference_agreement():
    """Autograd matches central differences on smooth losses."""
    assert finite_diff_check(quadratic, vec(0.3, -1.2, 2.0)) < 1e-8
    assert finite_diff_check(lambda views: views["p"].sum() * 0.0, vec(1.0, 2.0)) == 0.0
    tanh_loss = lambda views: torch.tanh(views["p"]).pow(3).sum()
    assert finite_diff_check(tanh_loss, vec(0.1, 0.5, -0.7)) < 1e-6


def test_finite_difference_step_range():
    """Steps outside (0, 1e-2] are a configuration error."""
    with pytest.raises(ConfigError):
        finite_diff_check(quadratic, vec(1.0), step=0.1)


def test_save_load_is_byte_exact(tmp_path):
    """Saved vectors reload bit-identically with the same layout."""
    params = ParamVector.from_tensors(
        {"w": torch.randn(3, 2, dtype=torch.float64), "b": torch.randn(2, dtype=torch.float64)}
    )
    manifest = save_params(params, tmp_path / "ckpt" / "policy", extra={"step": 3})
    loaded = load_params(manifest)
    assert loaded.layout == params.layout
    assert loaded.digest() == params.digest()
    save_params(loaded, tmp_path / "again" / "policy")
    assert (tmp_path / "again" / "policy.bin").read_bytes() == (tmp_path / "ckpt" / "policy.bin").read_bytes()


def test_truncated_blob_is_rejected(tmp_path):
    """A blob shorter than the manifest declares fails to load."""
    save_params(vec(1.0, 2.0, 3.0), tmp_path / "p")
    blob = tmp_path / "p.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(LayoutError):
        load_params(tmp_path / "p")
