"""Synthetic confounded POMDP with a scalar latent state.

::

    S_0     ~ Unif(s0_low, s0_high)
    O_t     = S_t + N(0, obs_noise_sd^2)
    W_t     = c_ws S_t + c_wo O_t + N(0, proxy_noise_sd^2)
    R_t     = A_t (r_o O_t + r_w W_t + r_s S_t) - r_aa A_t^2
    S_{t+1} = c_to O_t + c_ta A_t + N(0, trans_noise_sd^2)

The behaviour policy sees the latent state; target policies only see ``O``.
``W_t`` is produced by :func:`_observe` from ``S_t`` and fresh noise only,
so it never depends on the action or on the previous step.

Each trajectory owns a random substream spawned from ``(seed, index)`` and
draws its noise in one block, so results do not depend on how trajectories
are batched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, ValidationError
from .policy import PolicyClass, PolicyParams

# noise block columns: observation, proxy, transition, action uniform
_N_NOISE = 4


@dataclass(frozen=True)
class ConfoundedEnvSpec:
    s0_low: float = -0.5
    s0_high: float = 0.5
    obs_noise_sd: float = 1.0
    c_ws: float = 1.0
    c_wo: float = -0.5
    proxy_noise_sd: float = 0.3
    r_o: float = 1.0
    r_w: float = -0.2
    r_s: float = -0.8
    r_aa: float = 0.8
    c_to: float = 0.8
    c_ta: float = -0.3
    trans_noise_sd: float = 0.1
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if min(self.obs_noise_sd, self.proxy_noise_sd, self.trans_noise_sd) < 0:
            raise ConfigurationError("noise standard deviations must be >= 0")
        if not self.s0_low < self.s0_high:
            raise ConfigurationError("need s0_low < s0_high")
        if not self.action_low < self.action_high:
            raise ConfigurationError("empty action interval")

    @property
    def action_interval(self) -> tuple[float, float]:
        return (self.action_low, self.action_high)

    def reward_bound(self) -> float:
        """Conservative per-step bound on ``|R_t|``.

        Noise terms are bounded by six standard deviations and actions by the
        interval; the latent state bound is the fixed point of the transition
        under those ranges.
        """
        a_max = max(abs(self.action_low), abs(self.action_high))
        e_o, e_w, e_s = 6 * self.obs_noise_sd, 6 * self.proxy_noise_sd, 6 * self.trans_noise_sd
        if abs(self.c_to) >= 1:
            raise ConfigurationError("latent state is unbounded for |c_to| >= 1")
        s_max = max(abs(self.s0_low), abs(self.s0_high),
                    (abs(self.c_to) * e_o + abs(self.c_ta) * a_max + e_s) / (1 - abs(self.c_to)))
        o_max = s_max + e_o
        w_max = abs(self.c_ws) * s_max + abs(self.c_wo) * o_max + e_w
        return a_max * (abs(self.r_o) * o_max + abs(self.r_w) * w_max + abs(self.r_s) * s_max) \
            + abs(self.r_aa) * a_max**2


@dataclass(frozen=True)
class BehaviorPolicySpec:
    """``A | S, O ~ clip(N(mean_coef * S, sd^2), clip_low, clip_high)``."""

    mean_coef: float = -1.0 / 3.0
    sd: float = 0.4
    clip_low: float = -1.0
    clip_high: float = 1.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ConfigurationError("behaviour sd must be positive")
        if not self.clip_low < self.clip_high:
            raise ConfigurationError("empty clip interval")


class BehaviorPolicy:
    """Latent-state-aware sampler used to collect batch data."""

    def __init__(self, spec: BehaviorPolicySpec | None = None):
        self.spec = spec or BehaviorPolicySpec()

    def act(self, s, o, u):
        from scipy.special import ndtri
        sp = self.spec
        return np.clip(sp.mean_coef * s + sp.sd * ndtri(u), sp.clip_low, sp.clip_high)


class TargetPolicy:
    """Observation-only sampler wrapping a parameterized policy."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def act(self, s, o, u):
        del s  # target policies never see the latent state
        pc = self.params.policy_class
        return pc.sample_from_uniform(self.params.zeta, np.reshape(o, (len(u), -1)), u)


def _observe(spec: ConfoundedEnvSpec, s, eps_o, eps_w):
    o = s + spec.obs_noise_sd * eps_o
    w = spec.c_ws * s + spec.c_wo * o + spec.proxy_noise_sd * eps_w
    return o, w


def _reward(spec: ConfoundedEnvSpec, s, o, w, a):
    return a * (spec.r_o * o + spec.r_w * w + spec.r_s * s) - spec.r_aa * a**2


def _transition(spec: ConfoundedEnvSpec, o, a, eps_s):
    return spec.c_to * o + spec.c_ta * a + spec.trans_noise_sd * eps_s


def env_reset(spec: ConfoundedEnvSpec, rng: np.random.Generator, s0: float | None = None):
    """Draw ``(S_0, O_0, W_0)``; ``s0`` overrides the uniform draw."""
    s = rng.uniform(spec.s0_low, spec.s0_high) if s0 is None else float(s0)
    eps_o, eps_w = rng.standard_normal(2)
    o, w = _observe(spec, s, eps_o, eps_w)
    return s, np.array([o]), np.array([w])


def env_step(spec: ConfoundedEnvSpec, s, o, w, a, rng: np.random.Generator):
    """Return ``(R_t, S_{t+1}, O_{t+1}, W_{t+1})``."""
    if not spec.action_low <= a <= spec.action_high:
        raise ValidationError(f"action {a} outside [{spec.action_low}, {spec.action_high}]")
    o_s, w_s = float(np.squeeze(o)), float(np.squeeze(w))
    r = _reward(spec, s, o_s, w_s, a)
    eps_s, eps_o, eps_w = rng.standard_normal(3)
    s_next = _transition(spec, o_s, a, eps_s)
    o_next, w_next = _observe(spec, s_next, eps_o, eps_w)
    return float(r), float(s_next), np.array([o_next]), np.array([w_next])


def _noise_blocks(seed: int, n: int, steps: int):
    """Per-trajectory noise: uniforms for S_0 (n,) and a (n, steps, 4) block."""
    children = np.random.SeedSequence(seed).spawn(n)
    s0_u = np.empty(n)
    block = np.empty((n, steps, _N_NOISE))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        s0_u[i] = rng.random()
        block[i, :, :3] = rng.standard_normal((steps, 3))
        block[i, :, 3] = rng.random(steps)
    return s0_u, block


def _simulate(spec, policy, n, steps, seed):
    """Roll out ``steps`` action steps for ``n`` trajectories; arrays have a trailing terminal step."""
    s0_u, noise = _noise_blocks(seed, n, steps + 1)
    S = np.empty((n, steps + 1))
    O = np.empty((n, steps + 1))
    W = np.empty((n, steps + 1))
    A = np.empty((n, steps))
    R = np.empty((n, steps))
    S[:, 0] = spec.s0_low + (spec.s0_high - spec.s0_low) * s0_u
    O[:, 0], W[:, 0] = _observe(spec, S[:, 0], noise[:, 0, 0], noise[:, 0, 1])
    for t in range(steps):
        a = np.asarray(policy.act(S[:, t], O[:, t], noise[:, t, 3]), float)
        A[:, t] = a
        R[:, t] = _reward(spec, S[:, t], O[:, t], W[:, t], a)
        S[:, t + 1] = _transition(spec, O[:, t], a, noise[:, t + 1, 2])
        O[:, t + 1], W[:, t + 1] = _observe(spec, S[:, t + 1], noise[:, t + 1, 0], noise[:, t + 1, 1])
    return S, O, W, A, R


def rollout(spec: ConfoundedEnvSpec, policy, n: int, T: int, seed: int, gamma: float = 0.9) -> Dataset:
    """Simulate ``n`` trajectories with steps ``t = 0..T`` plus the terminal observation."""
    if n < 1 or T < 1:
        raise ConfigurationError("need n >= 1 and T >= 1")
    policy = policy if policy is not None else BehaviorPolicy()
    _, O, W, A, R = _simulate(spec, policy, n, T + 1, seed)
    return Dataset(O[:, :, None], W[:, :, None], A, R, spec.action_interval, gamma)


def clip_fraction(d: Dataset) -> float:
    """Share of logged actions sitting exactly on the interval bounds (diagnostic only)."""
    lo, hi = d.action_interval
    return float(np.mean((d.action <= lo) | (d.action >= hi)))


def oracle_horizon(spec: ConfoundedEnvSpec, gamma: float, tail_tol: float) -> int:
    """Smallest ``H`` with ``gamma^(H+1) R_bound / (1 - gamma) <= tail_tol``."""
    if not 0 <= gamma < 1:
        raise ConfigurationError("gamma must lie in [0, 1)")
    if not tail_tol > 0:
        raise ConfigurationError("tail_tol must be positive")
    if gamma == 0:
        return 0
    ratio = tail_tol * (1 - gamma) / spec.reward_bound()
    if ratio >= 1:
        return 0
    return max(0, math.ceil(math.log(ratio) / math.log(gamma)) - 1)


@dataclass(frozen=True)
class OracleValue:
    value: float
    se: float
    horizon: int
    n_mc: int


def true_policy_value(spec: ConfoundedEnvSpec, policy, n_mc: int = 1000, gamma: float = 0.9,
                      tail_tol: float = 1e-3, seed: int = 0) -> OracleValue:
    """Monte Carlo value of ``policy`` (a :class:`PolicyParams` or a sampler) from fresh rollouts."""
    if isinstance(policy, PolicyParams):
        policy = TargetPolicy(policy)
    H = oracle_horizon(spec, gamma, tail_tol)
    _, _, _, _, R = _simulate(spec, policy, n_mc, H + 1, seed)
    returns = R @ (gamma ** np.arange(H + 1))
    se = float(returns.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return OracleValue(float(returns.mean()), se, H, n_mc)


def target_policy(policy_class: PolicyClass, zeta) -> TargetPolicy:
    return TargetPolicy(PolicyParams(policy_class, zeta))
