"""
Shared fixtures.

Everything is desk-sized: short episodes, a four-robot subset of the suite,
small networks and a handful of updates, so the whole suite runs on a laptop.
"""
from __future__ import annotations

import pytest

from xemb_ml.dataset_service import gen_expert, gen_mixture
from xemb_ml.linkchain_service import make_suite
from xemb_ml.schemas import EnvSettings, LatentConfig, TrainConfig

SMALL_ROBOTS = ("biped-00", "hexa-00", "quad-00", "quad-01")
STEPS_PER_ROBOT = 200


@pytest.fixture(scope="session")
def env():
    return EnvSettings(horizon=100)


@pytest.fixture(scope="session")
def suite(env):
    return make_suite(0, env)


@pytest.fixture(scope="session")
def small_suite(suite):
    return [spec for spec in suite if spec.id in SMALL_ROBOTS]


@pytest.fixture(scope="session")
def expert_data(small_suite, env):
    return gen_expert(small_suite, "forward", STEPS_PER_ROBOT, seed=0, env=env)


@pytest.fixture(scope="session")
def mixture_data(small_suite, env):
    return gen_mixture(small_suite, "forward", STEPS_PER_ROBOT, 0.7, seed=0, env=env)


@pytest.fixture(scope="session")
def latent():
    return LatentConfig(
        latent_dim=4,
        encoder_widths=[8],
        core_widths=[16],
        value_widths=[16],
        head_widths=[8],
        descriptor_latent_dim=4,
        action_latent_dim=4,
        action_encoder_widths=[8],
    )


@pytest.fixture
def train_config():
    return TrainConfig(updates=4, per_robot_batch=8, eval_every=4, eval_episodes=1, seed=0)
