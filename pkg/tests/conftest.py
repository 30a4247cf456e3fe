import numpy as np
import pytest

from proxrl.environment import ConfoundedEnvSpec, rollout
from proxrl.experiments import make_target_policy


@pytest.fixture(scope="session")
def env():
    return ConfoundedEnvSpec()


@pytest.fixture(scope="session")
def small_data(env):
    """10 trajectories, T=8 (80 transition tuples)."""
    return rollout(env, None, 10, 8, seed=11)


@pytest.fixture(scope="session")
def near_behavior():
    return make_target_policy("near_behavior")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
