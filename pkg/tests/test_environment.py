import inspect

import numpy as np
import pytest

from proxrl.data import to_transition_tuples
from proxrl.environment import (BehaviorPolicy, BehaviorPolicySpec, ConfoundedEnvSpec, _observe, _simulate,
                                clip_fraction,
                                env_reset, env_step, oracle_horizon, rollout, true_policy_value)
from proxrl.errors import ConfigurationError, ValidationError


class ZeroPolicy:
    def act(self, s, o, u):
        return np.zeros_like(u)


def test_noise_free_reset():
    spec = ConfoundedEnvSpec(obs_noise_sd=0.0, proxy_noise_sd=0.0)
    s, o, w = env_reset(spec, np.random.default_rng(0), s0=0.2)
    assert s == 0.2 and o[0] == pytest.approx(0.2) and w[0] == pytest.approx(0.1)


def test_reset_initial_state_is_centered(env):
    rng = np.random.default_rng(1)
    s = np.array([env_reset(env, rng)[0] for _ in range(10_000)])
    assert abs(s.mean()) < 3 * s.std() / np.sqrt(len(s))
    assert s.min() >= -0.5 and s.max() <= 0.5


def test_reset_deterministic(env):
    a = env_reset(env, np.random.default_rng(5))
    b = env_reset(env, np.random.default_rng(5))
    assert a[0] == b[0] and np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


def test_step_reward_and_transition():
    spec = ConfoundedEnvSpec(trans_noise_sd=0.0)
    r, s_next, _, _ = env_step(spec, 1.0, np.array([1.0]), np.array([0.0]), 0.5, np.random.default_rng(0))
    assert r == pytest.approx(-0.1, abs=1e-15)
    assert s_next == pytest.approx(0.65, abs=1e-15)


def test_zero_action_zero_reward(env, rng):
    for _ in range(20):
        s, o, w = rng.normal(size=3)
        r, *_ = env_step(env, s, np.array([o]), np.array([w]), 0.0, rng)
        assert r == 0.0


def test_step_rejects_out_of_range_action(env, rng):
    with pytest.raises(ValidationError):
        env_step(env, 0.0, np.zeros(1), np.zeros(1), 1.2, rng)


def test_proxy_generation_never_sees_actions():
    # W_t is a function of (S_t, O_t, fresh noise) only
    assert list(inspect.signature(_observe).parameters) == ["spec", "s", "eps_o", "eps_w"]


def test_rollout_shapes_bounds_determinism(env):
    d = rollout(env, None, 25, 25, seed=3)
    assert len(to_transition_tuples(d)) == 625
    assert d.action.min() >= -1 and d.action.max() <= 1
    d2 = rollout(env, None, 25, 25, seed=3)
    for name in ("obs", "proxy", "action", "reward"):
        assert getattr(d, name).tobytes() == getattr(d2, name).tobytes()
    assert 0 <= clip_fraction(d) <= 1  # diagnostic only, no threshold


def test_rollout_prefix_independent_of_batch_size(env):
    big = rollout(env, None, 8, 5, seed=21)
    small = rollout(env, None, 3, 5, seed=21)
    assert np.array_equal(big.obs[:3], small.obs)


def test_behaviour_policy_uses_latent_state():
    pol = BehaviorPolicy(BehaviorPolicySpec(sd=1e-9))
    a = pol.act(np.array([0.9, -0.9]), np.array([0.0, 0.0]), np.array([0.5, 0.5]))
    assert a == pytest.approx([-0.3, 0.3])


def test_oracle_horizon_and_bound(env):
    H = oracle_horizon(env, 0.9, 1e-3)
    R = env.reward_bound()
    assert 0.9 ** (H + 1) * R / 0.1 <= 1e-3 < 0.9 ** H * R / 0.1
    assert H >= 65
    assert oracle_horizon(env, 0.0, 1e-3) == 0


def test_returns_bounded_by_reward_bound(env):
    d = rollout(env, None, 200, 30, seed=4, gamma=0.9)
    R = env.reward_bound()
    assert np.abs(d.reward).max() <= R
    disc = d.reward @ (0.9 ** np.arange(d.reward.shape[1]))
    assert np.abs(disc).max() <= R / (1 - 0.9)


def test_zero_policy_has_zero_value():
    spec = ConfoundedEnvSpec(obs_noise_sd=0, proxy_noise_sd=0, trans_noise_sd=0)
    assert true_policy_value(spec, ZeroPolicy(), n_mc=50).value == 0.0


def test_gamma_zero_uses_first_reward_only(env):
    ov = true_policy_value(env, BehaviorPolicy(), n_mc=400, gamma=0.0, seed=8)
    *_, R = _simulate(env, BehaviorPolicy(), 400, 1, 8)
    assert ov.horizon == 0
    assert ov.value == pytest.approx(R[:, 0].mean(), rel=1e-12)


def test_behaviour_value_is_finite_with_se(env):
    ov = true_policy_value(env, BehaviorPolicy(), n_mc=1000, gamma=0.9, seed=0)
    assert np.isfinite(ov.value) and 0 < ov.se < 0.5


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ConfoundedEnvSpec(obs_noise_sd=-1)
    with pytest.raises(ConfigurationError):
        ConfoundedEnvSpec(s0_low=1, s0_high=0)
    with pytest.raises(ConfigurationError):
        oracle_horizon(ConfoundedEnvSpec(), 1.0, 1e-3)
