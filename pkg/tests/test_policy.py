import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from proxrl.errors import DomainError
from proxrl.numerics import gauss_legendre_rule, tanh_sinh_rule
from proxrl.policy import VARIANTS, BoundaryClampWarning, PolicyClass, PolicyParams, softplus, softplus_inv


def random_zeta(pc, rng, scale=1.0):
    zeta = scale * rng.normal(size=pc.n_params)
    if pc.head == "scaled":  # keep 1 + c > 0
        zeta[0], zeta[1 + pc.obs_dim + 1] = np.abs(zeta[[0, 1 + pc.obs_dim + 1]]) + 0.2
    return zeta


def fd_grad(f, zeta, h=1e-5):
    g = np.zeros_like(zeta)
    for k in range(len(zeta)):
        e = np.zeros_like(zeta)
        e[k] = h
        g[k] = (f(zeta + e) - f(zeta - e)) / (2 * h)
    return g


def test_parameter_counts():
    assert PolicyClass("beta_linear").n_params == 4
    assert PolicyClass("gaussian_linear", obs_dim=3).n_params == 8
    assert PolicyClass("gaussian_mlp").n_params == 32 + 32 + 64 + 2
    assert PolicyClass("beta_scaled_linear").n_params == 6


def test_uniform_beta_density():
    pc = PolicyClass("beta_linear")
    zeta = np.array([softplus_inv(1.0), 0.0, softplus_inv(1.0), 0.0])
    a = np.linspace(-0.99, 0.99, 11)
    assert np.allclose(pc.density(zeta, np.array([0.7]), a), 0.5, atol=1e-14)


def test_beta_two_two_at_zero():
    pc = PolicyClass("beta_linear")
    zeta = np.array([softplus_inv(2.0), 0.0, softplus_inv(2.0), 0.0])
    assert pc.density(zeta, np.array([0.3]), 0.0) == pytest.approx(0.75, abs=1e-14)


def test_gaussian_change_of_variables():
    pc = PolicyClass("gaussian_linear")
    zeta = np.array([0.2, 0.5, 0.3, -0.1])
    o, a = 0.8, 0.4
    mu, sd = 0.2 + 0.5 * o, softplus(0.3 - 0.1 * o) + 1e-3
    expect = stats.norm.pdf(np.arctanh(a), mu, sd) / (1 - a**2)
    assert pc.density(zeta, np.array([o]), a) == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_density_normalises(variant):
    rng = np.random.default_rng(abs(hash(variant)) % 2**32)
    pc = PolicyClass(variant)
    rule = tanh_sinh_rule(41)
    for _ in range(25):
        zeta = 0.1 * rng.normal(size=pc.n_params)  # the MLP initialisation law, used for every head
        o = rng.normal(size=(1, 1))
        dens = pc.density(zeta, o, rule.nodes[None, :])
        assert abs(rule.weights @ dens[0] - 1) <= 1e-6


def test_gaussian_density_normalises_with_gauss_legendre():
    # smooth at the endpoints, so a polynomial rule suffices for moderate parameters
    pc = PolicyClass("gaussian_linear")
    rule = gauss_legendre_rule(41)
    rng = np.random.default_rng(5)
    for _ in range(25):
        dens = pc.density(0.05 * rng.normal(size=4), rng.normal(size=(1, 1)), rule.nodes[None, :])
        assert abs(rule.weights @ dens[0] - 1) <= 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
def test_density_gradient_matches_finite_differences(variant):
    rng = np.random.default_rng(7)
    pc = PolicyClass(variant)
    for _ in range(10):
        zeta = random_zeta(pc, rng, 0.5)
        o = rng.normal(size=1)
        a = rng.uniform(-0.9, 0.9)
        g = pc.grad_density(zeta, o, a)
        fd = fd_grad(lambda z: pc.density(z, o, a), zeta)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8 * max(1, np.abs(fd).max()))


def test_gradient_nonzero_at_density_mode():
    pc = PolicyClass("beta_linear")
    zeta = np.array([softplus_inv(2.0), 0.0, softplus_inv(2.0), 0.0])
    assert np.linalg.norm(pc.grad_density(zeta, np.array([0.5]), 0.0)) > 1e-3


def test_saturated_alpha_gradient_is_softplus_chain():
    pc = PolicyClass("beta_linear")
    zeta = np.array([-30.0, 0.0, 0.5, 0.0])  # alpha = softplus(-30), tiny
    o, a = np.array([0.4]), 0.1
    fd = fd_grad(lambda z: pc.density(z, o, a), zeta)
    np.testing.assert_allclose(pc.grad_density(zeta, o, a), fd, rtol=1e-4, atol=1e-12)


def test_sampling_respects_interval_and_symmetry():
    pc = PolicyClass("beta_linear")
    zeta = np.array([softplus_inv(1.0), 0.0, softplus_inv(1.0), 0.0])
    rng = np.random.default_rng(0)
    a = pc.sample(zeta, np.zeros((10_000, 1)), rng)
    assert a.min() > -1 and a.max() < 1
    assert abs(a.mean()) < 3 * a.std() / 100


def test_saturated_gaussian_samples_near_upper_bound():
    pc = PolicyClass("gaussian_linear")
    a = pc.sample(np.array([6.0, 0.0, softplus_inv(0.2), 0.0]), np.zeros((2000, 1)), np.random.default_rng(1))
    assert np.median(a) > 0.99 and a.max() <= 1.0


@pytest.mark.parametrize("variant", ["beta_linear", "gaussian_linear", "gaussian_mlp"])
def test_sampler_matches_density(variant):
    rng = np.random.default_rng(2)
    pc = PolicyClass(variant)
    zeta = random_zeta(pc, rng, 0.5)
    o = np.array([0.3])
    a = pc.sample(zeta, np.tile(o, (10_000, 1)), rng)
    ks = stats.kstest(a, lambda x: np.array([pc.cdf(zeta, o, v) for v in np.atleast_1d(x)]))
    assert ks.statistic < 1.36 / np.sqrt(10_000)


def test_cdf_consistent_with_density():
    rng = np.random.default_rng(3)
    pc = PolicyClass("beta_linear")
    zeta = random_zeta(pc, rng, 0.5)
    o = np.array([-0.2])
    rule = tanh_sinh_rule(61, (-1.0, 0.25))
    assert rule.weights @ pc.density(zeta, o, rule.nodes) == pytest.approx(pc.cdf(zeta, o, 0.25), abs=1e-8)


def test_boundary_clamp_warns():
    pc = PolicyClass("gaussian_linear")
    with pytest.warns(BoundaryClampWarning):
        v = pc.density(np.zeros(4), np.array([0.0]), 1.0)
    assert np.isfinite(v)


def test_outside_interval_is_domain_error():
    with pytest.raises(DomainError):
        PolicyClass("beta_linear").density(np.zeros(4), np.array([0.0]), 1.5)


def test_params_round_trip_json():
    pc = PolicyClass("gaussian_mlp", hidden=4)
    params = PolicyParams(pc, np.arange(pc.n_params) / 10)
    back = PolicyParams.from_dict(json.loads(params.to_json()))
    assert back.policy_class == pc and np.array_equal(back.zeta, params.zeta)


def test_params_length_checked():
    with pytest.raises(ValueError):
        PolicyParams(PolicyClass("beta_linear"), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(z=st.floats(-50, 50))
def test_softplus_link_positive(z):
    assert softplus(np.array([z]))[0] > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_samples_inside_interval_any_class(seed):
    rng = np.random.default_rng(seed)
    pc = PolicyClass(VARIANTS[seed % len(VARIANTS)], action_interval=(-2.0, 0.5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryClampWarning)
        a = pc.sample(random_zeta(pc, rng), rng.normal(size=(50, 1)), rng)
    assert np.all((a >= -2.0) & (a <= 0.5))
