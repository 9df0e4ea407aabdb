"""
Test the LinkChain embodiment family.

Validates suite generation, the dynamics and reward formulas, the scripted
controller and rollout evaluation against closed-form expectations.
"""
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from pydantic import ValidationError

from xemb_ml.errors import CorruptDataset, NumericalError, ShapeError
from xemb_ml.linkchain_service import (
    COMMANDS,
    EnvState,
    expert_oracle,
    evaluate,
    expert_reference_scores,
    load_suite,
    make_controller,
    make_suite,
    observe,
    reset,
    reward_fn,
    rollout,
    save_suite,
    scripted_controller,
    step,
    target_velocity,
)
from xemb_ml.schemas import EmbodimentSpec


def test_suite_is_deterministic(env):
    """Equal seeds give equal suites, different seeds differ."""
    assert make_suite(3, env) == make_suite(3, env)
    assert make_suite(3, env) != make_suite(4, env)


def test_suite_layout(suite):
    """Sixteen robots: 9 quadruped-like, 6 biped-like, 1 hexapod-like, all in family shape."""
    assert len(suite) == 16
    families = [spec.family for spec in suite]
    assert families.count("quadruped-like") == 9
    assert families.count("biped-like") == 6
    assert families.count("hexapod-like") == 1
    assert all(spec.matches_family_shape() for spec in suite)
    assert [spec.id for spec in suite] == sorted(spec.id for spec in suite)


def test_zero_action_keeps_zero_state(suite, env):
    """The inert system stays at rest and earns the tracking kernel at v = 0."""
    spec = suite[0]
    result = step(spec, reset(spec, 1.0), np.zeros(spec.n_joints), env)
    assert np.all(result.next.q == 0.0) and np.all(result.next.qdot == 0.0)
    assert result.reward == pytest.approx(spec.k_track * math.exp(-1.0 / env.track_width))
    assert not result.done


def test_joint_limit_terminates(suite, env):
    """Starting past a joint limit ends the episode with reason 'limit'."""
    spec = suite[0]
    state = replace(reset(spec, 1.0), q=1.1 * np.asarray(spec.q_limit))
    result = step(spec, state, np.zeros(spec.n_joints), env)
    assert result.done
    assert result.done_reason == "limit"


def test_step_matches_update_equations(suite, env):
    """One step from a random state equals a direct evaluation of the Euler update."""
    spec = suite[5]
    rng = np.random.default_rng(0)
    j = spec.n_joints
    state = EnvState(
        q=rng.uniform(-0.2, 0.2, j), qdot=rng.normal(size=j), prev_action=rng.normal(size=j), t=3, command=1.0
    )
    action = rng.uniform(-1.0, 1.0, j)
    result = step(spec, state, action, env)

    gear, damping, stiffness = (np.asarray(x) for x in (spec.gear, spec.damping, spec.stiffness))
    qdot = state.qdot + env.dt * (gear * action - damping * state.qdot - stiffness * state.q)
    q = state.q + env.dt * qdot
    v = float(np.dot(spec.coupling, qdot))
    expected = spec.k_track * math.exp(-((v - 1.0) ** 2) / env.track_width)
    expected -= spec.k_torque * float(action @ action)
    expected -= spec.k_rate * float((action - state.prev_action) @ (action - state.prev_action))
    assert np.allclose(result.next.qdot, qdot, rtol=0, atol=1e-15)
    assert np.allclose(result.next.q, q, rtol=0, atol=1e-15)
    assert result.reward == pytest.approx(max(0.0, expected), abs=1e-12)
    assert result.next.t == 4


def test_nonfinite_state_is_rejected(suite, env):
    """NaN joint positions raise a numerical error."""
    spec = suite[0]
    state = replace(reset(spec, 1.0), q=np.full(spec.n_joints, np.nan))
    with pytest.raises(NumericalError):
        step(spec, state, np.zeros(spec.n_joints), env)


def test_reward_closed_forms(suite, env):
    """Perfect tracking pays k_track, a 0.5 error pays k_track / e, huge torque pays 0."""
    spec = suite[2]
    zeros = np.zeros(spec.n_joints)
    on_target = replace(reset(spec, 1.0), qdot=target_velocity(spec, 1.0))
    assert reward_fn(spec, on_target, zeros, zeros, env) == pytest.approx(spec.k_track)

    off_target = replace(reset(spec, 1.0), qdot=target_velocity(spec, 0.5))
    assert reward_fn(spec, off_target, zeros, zeros, env) == pytest.approx(spec.k_track * math.exp(-1.0))

    big = np.full(spec.n_joints, 50.0)
    assert reward_fn(spec, on_target, big, zeros, env) == 0.0


def test_observation_carries_base_velocity(suite, env):
    """o_g holds (c, v, v - c) with v = sum_j w_j qdot_j."""
    spec = suite[7]
    rng = np.random.default_rng(1)
    state = replace(reset(spec, -1.0), qdot=rng.normal(size=spec.n_joints))
    obs = observe(spec, state)
    v = float(np.asarray(spec.coupling) @ state.qdot)
    assert obs.o_g.tolist() == [-1.0, v, v + 1.0]
    assert obs.o_j.shape == (spec.n_joints, 3)
    assert obs.o_f.shape == (spec.n_feet, 2)
    assert obs.d_j.shape == (spec.n_joints, 4)


def test_controller_feedforward_at_steady_state(suite, env):
    """At qdot = qdot* and q = 0 the noiseless full-gain action is the damping feedforward."""
    spec = suite[1]
    target = target_velocity(spec, 1.0)
    state = replace(reset(spec, 1.0), qdot=target)
    action = scripted_controller(spec, state, 1.0, 0.0, None, env)
    assert np.allclose(action, np.asarray(spec.damping) * target / np.asarray(spec.gear))


def test_expert_tracks_both_directions(suite, env):
    """The expert oracle passes on every robot and is direction-symmetric within 10%."""
    for spec in suite:
        forward = expert_oracle(spec, COMMANDS["forward"], env)
        backward = expert_oracle(spec, COMMANDS["backward"], env)
        assert forward < env.tracking_tolerance
        assert backward < env.tracking_tolerance
        assert abs(forward - backward) <= 0.1 * max(forward, backward) + 1e-12


def test_weak_noisy_controller_underperforms_expert(suite, env):
    """Gain 0.1 with noise 0.5 earns less than the expert on every robot."""
    expert = expert_reference_scores(suite, 1.0, env)
    for spec in suite:
        rng = np.random.default_rng(0)
        weak = rollout(spec, 1.0, make_controller(spec, 0.1, 0.5, rng, env), env)
        assert weak.total_return < expert[spec.id]
        assert np.all(weak.rewards >= 0.0)


def test_zero_policy_return_closed_form(suite, env):
    """A zero-torque policy earns horizon * k_track * exp(-c^2 / width) and is deterministic."""
    spec = suite[4]
    policy = lambda obs: np.zeros(obs.d_j.shape[0])
    first = evaluate(policy, spec, 1.0, 2, np.random.default_rng(0), env)
    second = evaluate(policy, spec, 1.0, 2, np.random.default_rng(0), env)
    assert first == second
    assert first == pytest.approx(env.horizon * spec.k_track * math.exp(-1.0 / env.track_width))


def test_rollout_records_horizon_reason(suite, env):
    """An episode that never violates a limit ends at the horizon."""
    spec = suite[3]
    episode = rollout(spec, 1.0, make_controller(spec, 1.0, 0.0, None, env), env)
    assert episode.length == env.horizon
    assert episode.done_reason == "horizon"
    assert episode.dones[-1] and not episode.dones[:-1].any()


def test_suite_manifest_round_trip(tmp_path, suite, env):
    """A saved suite reloads with the same specs and expert scores."""
    manifest = save_suite(suite, 0, tmp_path / "suite.json", env)
    loaded = load_suite(tmp_path / "suite.json")
    assert loaded.specs == manifest.specs
    assert loaded.expert_scores == pytest.approx(manifest.expert_scores)
    assert loaded.env == env


def test_wrong_action_length_is_shape_error(suite, env):
    """An action with the wrong number of entries raises ShapeError."""
    spec = suite[0]
    with pytest.raises(ShapeError):
        step(spec, reset(spec, 1.0), np.zeros(spec.n_joints + 1), env)


def test_family_shape_is_enforced(suite):
    """A quadruped-like spec with five feet fails validation."""
    spec = next(s for s in suite if s.family == "quadruped-like")
    payload = spec.model_dump()
    payload.update(n_feet=5, foot_joints=payload["foot_joints"] + [payload["foot_joints"][0]])
    with pytest.raises(ValidationError, match="quadruped-like"):
        EmbodimentSpec.model_validate(payload)


def test_bad_suite_manifest_is_corrupt(tmp_path, suite, env):
    """A saved suite edited into an off-family shape fails to load as corrupt data."""
    save_suite(suite, 0, tmp_path / "suite.json", env)
    payload = json.loads((tmp_path / "suite.json").read_text())
    robot = next(s for s in payload["specs"] if s["family"] == "hexapod-like")
    robot["family"] = "quadruped-like"
    (tmp_path / "suite.json").write_text(json.dumps(payload))
    with pytest.raises(CorruptDataset):
        load_suite(tmp_path / "suite.json")
