"""
Test dataset generation, storage and sampling.

Validates variant composition, reproducibility, on-disk validation and the
per-robot batch sampler.
"""
import json

import numpy as np
import pytest
from scipy.stats import ks_2samp

from xemb_ml.dataset_service import (
    episode_returns,
    equal_interval_episodes,
    gen_expert,
    gen_mixture,
    gen_replay,
    generate_variant,
    load_dataset,
    moving_average,
    parse_variant_name,
    replay_truncation_index,
    sample_batch,
    save_dataset,
    sweep_schedule,
)
from xemb_ml.errors import ConfigError, CorruptDataset, GenerationError
from xemb_ml.linkchain_service import EnvState, expert_reference_scores, step
from xemb_ml.schemas import EnvSettings, SweepSettings

from .conftest import SMALL_ROBOTS, STEPS_PER_ROBOT

LARGE_BUDGET = 4000


@pytest.fixture(scope="module")
def replay_data(small_suite, env):
    return gen_replay(small_suite, "forward", STEPS_PER_ROBOT, seed=0, env=env)


def test_expert_covers_budget(expert_data):
    """Every robot gets at least the step budget in whole episodes."""
    assert expert_data.robots == sorted(SMALL_ROBOTS)
    for robot, shard in expert_data.shards.items():
        assert shard.n_transitions >= STEPS_PER_ROBOT
        assert expert_data.manifest.counts[robot] == shard.n_transitions
        assert np.all(shard.rewards >= 0.0)
        assert np.all(shard.episode_phase == 1)


def test_episodes_partition_shard(expert_data, mixture_data):
    """Episode slices tile the shard and each episode ends on its only done flag."""
    for dataset in (expert_data, mixture_data):
        for shard in dataset.shards.values():
            slices = shard.episode_slices()
            assert slices[0].start == 0 and slices[-1].stop == shard.n_transitions
            for s in slices:
                dones = shard.dones[s]
                assert dones[-1] == 1.0 and not dones[:-1].any()


def test_episode_returns_sum_rewards(mixture_data):
    """Per-episode returns equal the reward sums over each episode slice."""
    for shard in mixture_data.shards.values():
        sums = [shard.rewards[s].sum() for s in shard.episode_slices()]
        assert np.allclose(episode_returns(shard), sums)


def test_expert_is_reproducible(small_suite, env, expert_data):
    """The same seed regenerates bit-identical shards."""
    again = gen_expert(small_suite, "forward", STEPS_PER_ROBOT, seed=0, env=env)
    for robot in expert_data.robots:
        assert np.array_equal(again.shards[robot].actions, expert_data.shards[robot].actions)
        assert np.array_equal(again.shards[robot].rewards, expert_data.shards[robot].rewards)


def test_expert_tracking_check(small_suite):
    """An unreachable tracking tolerance fails generation and names the robot."""
    strict = EnvSettings(horizon=100, tracking_tolerance=1e-12)
    with pytest.raises(GenerationError) as info:
        gen_expert(small_suite[:1], "forward", 100, seed=0, env=strict)
    assert info.value.robot == small_suite[0].id


def test_budget_below_horizon(small_suite, env):
    """A budget shorter than one episode is rejected."""
    with pytest.raises(ConfigError):
        gen_expert(small_suite, "forward", env.horizon - 1, seed=0, env=env)


def test_mixture_fraction_range(small_suite, env):
    """Mixture fractions outside [0, 1] are rejected."""
    with pytest.raises(ConfigError):
        gen_mixture(small_suite, "forward", STEPS_PER_ROBOT, 1.2, seed=0, env=env)


def test_mixture_phase_tags(mixture_data):
    """Early-phase episodes are exactly those with gain below the phase boundary."""
    boundary = SweepSettings().phase_boundary
    for shard in mixture_data.shards.values():
        assert np.array_equal(shard.episode_phase == 0, shard.episode_eta < boundary)
        assert 0.0 < shard.phase_share() < 1.0


def test_zero_fraction_is_late_phase_only(small_suite, env):
    """X = 0 keeps only expert-like sweep tail episodes."""
    dataset = gen_mixture(small_suite[:2], "forward", STEPS_PER_ROBOT, 0.0, seed=0, env=env)
    for shard in dataset.shards.values():
        assert np.all(shard.episode_phase == 1)


def test_zero_fraction_matches_expert_returns(small_suite, env, expert_data):
    """X = 0 episode returns follow the expert variant (KS statistic below 0.1)."""
    dataset = gen_mixture(small_suite, "forward", STEPS_PER_ROBOT, 0.0, seed=0, env=env)
    for robot, shard in dataset.shards.items():
        expert = expert_data.shards[robot].episode_return
        assert ks_2samp(shard.episode_return, expert).statistic < 0.1
        assert np.array_equal(np.sort(shard.episode_return), np.sort(expert))


def test_expert_episodes_near_reference(small_suite, env, expert_data):
    """At least 80% of expert episodes score within 10% of the expert reference."""
    reference = expert_reference_scores(small_suite, 1.0, env)
    for robot, shard in expert_data.shards.items():
        close = np.abs(shard.episode_return - reference[robot]) <= 0.1 * abs(reference[robot])
        assert close.mean() >= 0.8


def test_variant_ordering(small_suite, env, expert_data, replay_data, mixture_data):
    """Expert episodes earn more on average than replay and 70% mixture episodes."""
    for robot in expert_data.robots:
        expert = expert_data.shards[robot].episode_return.mean()
        assert expert > replay_data.shards[robot].episode_return.mean()
        assert expert > mixture_data.shards[robot].episode_return.mean()


def test_done_flags_match_dynamics(small_suite, env, mixture_data):
    """Replaying stored (state, action) pairs reproduces rewards and termination."""
    specs = {spec.id: spec for spec in small_suite}
    for robot, shard in mixture_data.shards.items():
        spec = specs[robot]
        for s in shard.episode_slices()[:3]:
            for t, i in enumerate(range(s.start, s.stop)):
                state = EnvState(
                    q=shard.o_j[i, :, 0],
                    qdot=shard.o_j[i, :, 1],
                    prev_action=shard.o_j[i, :, 2],
                    t=t,
                    command=float(shard.o_g[i, 0]),
                )
                result = step(spec, state, shard.actions[i], env)
                assert result.done == bool(shard.dones[i])
                assert result.reward == pytest.approx(shard.rewards[i], abs=1e-12)


def test_save_load_save_is_byte_identical(tmp_path, expert_data):
    """A reloaded dataset writes exactly the same files."""
    save_dataset(expert_data, tmp_path / "a")
    loaded = load_dataset(tmp_path / "a")
    save_dataset(loaded, tmp_path / "b")
    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file():
            twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
            assert twin.read_bytes() == path.read_bytes()
    assert loaded.manifest.counts == expert_data.manifest.counts


def test_truncated_blob_is_corrupt(tmp_path, expert_data):
    """A shortened blob fails validation."""
    save_dataset(expert_data, tmp_path)
    blob = tmp_path / SMALL_ROBOTS[0] / "rewards.f64"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CorruptDataset):
        load_dataset(tmp_path)


def test_count_mismatch_is_corrupt(tmp_path, expert_data):
    """A manifest count off by one fails validation."""
    manifest_path = save_dataset(expert_data, tmp_path)
    payload = json.loads(manifest_path.read_text())
    payload["counts"][SMALL_ROBOTS[0]] += 1
    manifest_path.write_text(json.dumps(payload))
    with pytest.raises(CorruptDataset):
        load_dataset(tmp_path)


def test_sample_batch_shapes(expert_data):
    """8 rows per robot, only the requested robots, reproducible under a fixed rng."""
    batch = sample_batch(expert_data, expert_data.robots, 8, np.random.default_rng(0))
    assert len(batch) == 8 * len(SMALL_ROBOTS)
    assert all(len(b) == 8 for b in batch.per_robot.values())

    single = sample_batch(expert_data, ["quad-00"], 8, np.random.default_rng(0))
    assert single.robots == ["quad-00"]

    again = sample_batch(expert_data, expert_data.robots, 8, np.random.default_rng(0))
    for robot in batch.robots:
        assert np.array_equal(batch.per_robot[robot].actions, again.per_robot[robot].actions)


def test_sample_unknown_robot(expert_data):
    """Unknown robot ids are a configuration error."""
    with pytest.raises(ConfigError):
        sample_batch(expert_data, ["walker-99"], 8, np.random.default_rng(0))


def test_variant_names():
    """Dataset names parse into variant, fraction and direction."""
    assert parse_variant_name("expert-forward") == ("expert", 0.0, "forward")
    assert parse_variant_name("mixture70-backward") == ("mixture", 0.7, "backward")
    with pytest.raises(ConfigError):
        parse_variant_name("mixture150-forward")
    with pytest.raises(ConfigError):
        parse_variant_name("expert-sideways")


def test_sweep_schedule_plateaus():
    """Gain ramps up to 1 and noise down to its floor, then both plateau."""
    eta, sigma = sweep_schedule(100)
    assert eta[0] == pytest.approx(0.05) and eta[-1] == pytest.approx(1.0)
    assert sigma[0] == pytest.approx(0.8) and sigma[-1] == pytest.approx(0.05)
    assert np.all(np.diff(eta) >= 0.0)
    assert np.allclose(eta[70:], 1.0)
    assert np.all(eta[70:] == 1.0) and np.all(sigma[70:] == SweepSettings().expert_noise)


def test_replay_truncation():
    """The first moving-average crossing of 90% of the final value is chosen."""
    returns = np.array([0.0, 1.0, 2.0, 9.0, 10.0, 10.0])
    assert moving_average(returns, 1).tolist() == returns.tolist()
    assert replay_truncation_index(returns, 1, 0.9) == 3
    with pytest.raises(GenerationError):
        replay_truncation_index(np.zeros(4), 2, 0.9)


def test_equal_interval_selection():
    """Whole episodes at equal spacing until the budget is covered."""
    lengths = {i: 10 for i in range(10)}
    assert equal_interval_episodes(range(10), lengths, 30) == [0, 4, 9]
    assert equal_interval_episodes(range(3), lengths, 1000) == [0, 1, 2]


@pytest.mark.slow
def test_mixture_share_at_scale(small_suite, env):
    """With a budget well above the horizon the early share is within 2% of X."""
    dataset = generate_variant("mixture70-forward", small_suite[:2], 2000, seed=1, env=env)
    for shard in dataset.shards.values():
        assert 0.68 <= shard.phase_share() <= 0.72


@pytest.mark.slow
def test_replay_spread_at_scale(small_suite, env):
    """Replay returns span an interquartile range of at least 30% of the expert reference."""
    specs = [spec for spec in small_suite if spec.id in ("biped-00", "quad-00")]
    dataset = gen_replay(specs, "forward", LARGE_BUDGET, seed=0, env=env)
    reference = expert_reference_scores(specs, 1.0, env)
    for robot, shard in dataset.shards.items():
        q1, q3 = np.percentile(shard.episode_return, [25.0, 75.0])
        assert q3 - q1 >= 0.3 * reference[robot]


@pytest.mark.slow
def test_full_fraction_stays_below_half_expert(small_suite, env):
    """With X = 1 every episode scores below half the expert reference."""
    specs = [spec for spec in small_suite if spec.id in ("biped-00", "quad-00")]
    dataset = gen_mixture(specs, "forward", LARGE_BUDGET, 1.0, seed=0, env=env)
    reference = expert_reference_scores(specs, 1.0, env)
    for robot, shard in dataset.shards.items():
        assert np.all(shard.episode_phase == 0)
        assert np.all(shard.episode_return < 0.5 * reference[robot])


@pytest.mark.slow
def test_backward_expert_matches_reference(small_suite, env):
    """Backward expert data earns close to the backward expert reference."""
    dataset = gen_expert(small_suite, "backward", STEPS_PER_ROBOT, seed=0, env=env)
    reference = expert_reference_scores(small_suite, -1.0, env)
    for robot, shard in dataset.shards.items():
        assert shard.episode_return.mean() > 0.9 * reference[robot]
