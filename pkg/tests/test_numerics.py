import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxrl.errors import ConfigurationError, DegenerateBandwidthError, NumericalInputError, ValidationError
from proxrl.numerics import (GaussianKernel, PolynomialKernel, gauss_legendre_rule, kernel_eval,
                             median_heuristic, n_monomials, polynomial_features,
                             regularized_kernel_quadform)


def test_gaussian_kernel_values():
    k = GaussianKernel(1.0)
    assert kernel_eval(k, [0.3, -2.0], [0.3, -2.0]) == 1.0
    assert kernel_eval(k, [0.0], [1.0]) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert kernel_eval(k, [0.0], [1.0]) == pytest.approx(0.606531, abs=1e-6)


def test_polynomial_kernel_value():
    assert kernel_eval(PolynomialKernel(2, 1.0), [1.0], [1.0]) == 4.0


def test_kernel_dimension_mismatch():
    with pytest.raises(ValidationError):
        kernel_eval(GaussianKernel(1.0), [0.0, 1.0], [0.0])


def test_kernel_parameter_validation():
    with pytest.raises(ConfigurationError):
        GaussianKernel(0.0)
    with pytest.raises(ConfigurationError):
        PolynomialKernel(0, 1.0)


@pytest.mark.parametrize("points,h", [([0.0, 1.0, 3.0], 2.0), ([0.0, 2.0], 2.0)])
def test_median_heuristic_small(points, h):
    assert median_heuristic(points) == h


def test_median_heuristic_degenerate():
    with pytest.raises(DegenerateBandwidthError):
        median_heuristic([5.0, 5.0, 5.0])


def test_median_heuristic_subsampling_is_close_and_seeded(rng):
    X = rng.normal(size=(800, 3))
    exact = median_heuristic(X)
    sub = median_heuristic(X, max_pairs=20_000, seed=4)
    assert sub == median_heuristic(X, max_pairs=20_000, seed=4)
    assert abs(sub - exact) / exact < 0.02


def test_polynomial_feature_order():
    f = polynomial_features(1.0, 2.0, 3.0, 2)
    assert f.tolist() == [1, 1, 2, 3, 1, 2, 3, 4, 6, 9]
    assert polynomial_features(0.0, 0.0, 0.0, 1).tolist() == [1, 0, 0, 0]
    assert n_monomials(3, 2) == 10 == math.comb(5, 2)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 6), d=st.integers(1, 3))
def test_monomial_count_is_stars_and_bars(k, d):
    assert n_monomials(k, d) == math.comb(k + d, d)


def test_quadrature_basics():
    r = gauss_legendre_rule(1, (-1, 1))
    assert r.nodes.tolist() == [0.0] and r.weights.tolist() == [2.0]
    assert gauss_legendre_rule(2).integrate(lambda a: a**2) == pytest.approx(2 / 3, rel=1e-14)
    for m in (1, 4, 21):
        assert gauss_legendre_rule(m).integrate(lambda a: 0.5 + 0 * a) == pytest.approx(1.0, rel=1e-14)


def test_quadrature_empty_interval():
    with pytest.raises(ConfigurationError):
        gauss_legendre_rule(3, (1.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 25), lo=st.floats(-3, 0), width=st.floats(0.1, 4),
       seed=st.integers(0, 10_000))
def test_quadrature_exact_for_polynomials(m, lo, width, seed):
    hi = lo + width
    rule = gauss_legendre_rule(m, (lo, hi))
    assert rule.weights.sum() == pytest.approx(width, rel=1e-12)
    assert np.all(rule.weights > 0) and np.all((rule.nodes > lo) & (rule.nodes < hi))
    coef = np.random.default_rng(seed).normal(size=2 * m)  # degree 2m-1
    exact = np.polynomial.polynomial.Polynomial(coef).integ()
    truth = exact(hi) - exact(lo)
    got = rule.integrate(lambda a: np.polynomial.polynomial.polyval(a, coef))
    assert got == pytest.approx(truth, rel=1e-10, abs=1e-10)


def test_quadform_identity_kernel():
    phi = np.array([1.0, -2.0, 0.5])
    nT, mu = 3, 0.1
    expect = phi @ phi / (1 + 1 / (2 * nT * mu))
    assert regularized_kernel_quadform(np.eye(3), mu, phi, nT) == pytest.approx(expect, rel=1e-14)


def test_quadform_special_cases():
    assert regularized_kernel_quadform(np.eye(2), 0.3, np.zeros(2)) == 0.0
    K = np.diag([2.0, 0.0])
    assert regularized_kernel_quadform(K, 0.25, np.ones(2), 2) == pytest.approx(2 / 3, rel=1e-14)


def test_quadform_rejects_asymmetric():
    with pytest.raises(NumericalInputError):
        regularized_kernel_quadform(np.array([[1.0, 0.5], [0.0, 1.0]]), 0.1, np.ones(2))


def test_quadform_clamps_negative_round_off():
    K = np.array([[1.0, 1.0], [1.0, 1.0]]) - 1e-13 * np.eye(2)
    assert regularized_kernel_quadform(K, 0.1, np.array([1.0, -1.0])) >= 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 15))
def test_quadform_nonnegative_and_monotone_in_mu(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    K = GaussianKernel(median_heuristic(X)).matrix(X)
    phi = rng.normal(size=n)
    vals = [regularized_kernel_quadform(K, mu, phi) for mu in (1e-4, 1e-2, 1.0, 100.0)]
    assert vals[0] >= 0
    assert all(b >= a - 1e-12 * max(1.0, abs(a)) for a, b in zip(vals, vals[1:]))


def test_gaussian_kernel_matrix_is_psd(rng):
    X = rng.normal(size=(60, 3))
    K = GaussianKernel(median_heuristic(X)).matrix(X)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-10 * np.trace(K)


def test_tanh_sinh_weights_and_singular_integrand():
    from proxrl.numerics import make_rule, tanh_sinh_rule
    r = tanh_sinh_rule(41, (-1.0, 1.0))
    assert np.all(r.weights > 0) and np.all(np.abs(r.nodes) < 1)
    assert r.weights.sum() == pytest.approx(2.0, rel=1e-10)
    # int_0^1 y^(-1/2) dy = 2, singular at the left end
    r01 = tanh_sinh_rule(41, (0.0, 1.0))
    # truncation at the outermost node costs about 2 * sqrt(2e-14)
    assert r01.integrate(lambda y: y**-0.5) == pytest.approx(2.0, rel=1e-6)
    assert make_rule("gauss_legendre", 5).nodes.shape == (5,)
    with pytest.raises(ConfigurationError):
        make_rule("simpson", 5)
    with pytest.raises(ConfigurationError):
        tanh_sinh_rule(4)
