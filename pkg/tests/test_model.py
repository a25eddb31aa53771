import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.stats import norm

from panelmix import (
    ComponentParams,
    MixtureParams,
    PanelDataset,
    canonicalize,
    component_loglik,
    mixture_loglik,
)
from conftest import mixture


def _dataset(y, x=None, z=None):
    y = np.asarray(y, dtype=float)
    n, T = y.shape
    x = np.zeros((n, T, 0)) if x is None else np.asarray(x, dtype=float)
    z = np.zeros((n, T, 0)) if z is None else np.asarray(z, dtype=float)
    return PanelDataset(y=y, x=x, z=z)


def test_component_loglik_single_standard_point():
    data = _dataset([[1.7]])
    val = component_loglik(data, 0, (), ComponentParams(1.7, 1.0))
    assert_allclose(val, -0.5 * math.log(2 * math.pi), rtol=0, atol=1e-12)
    assert_allclose(val, -0.9189385, atol=5e-8)


def test_component_loglik_two_periods_zero_residuals():
    data = _dataset([[0.3, 0.3]])
    val = component_loglik(data, 0, (), ComponentParams(0.3, 1.0))
    assert_allclose(val, -math.log(2 * math.pi), atol=1e-12)


def test_component_loglik_matches_per_period_oracle(rng):
    n, T, q, p = 4, 3, 2, 1
    y = rng.standard_normal((n, T))
    x = rng.standard_normal((n, T, q))
    z = rng.standard_normal((n, T, p))
    data = _dataset(y, x, z)
    gamma = rng.standard_normal(p)
    theta = ComponentParams(0.4, 1.7, rng.standard_normal(q))
    for i in range(n):
        expected = 0.0
        for t in range(T):
            r = y[i, t] - theta.mu - x[i, t] @ theta.beta - z[i, t] @ gamma
            expected += norm.logpdf(r, scale=math.sqrt(1.7))
        assert_allclose(component_loglik(data, i, gamma, theta), expected, atol=1e-12)


def test_component_loglik_contract_errors():
    data = _dataset([[0.0, 0.0]])
    with pytest.raises(IndexError):
        component_loglik(data, 5, (), ComponentParams(0.0, 1.0))
    with pytest.raises(ValueError):
        component_loglik(data, 0, (), ComponentParams(0.0, 1.0, [1.0]))
    with pytest.raises(ValueError):
        ComponentParams(0.0, -1.0)


def test_mixture_single_component_equals_component_sum(rng):
    data = _dataset(rng.standard_normal((5, 2)))
    params = mixture([1.0], [0.2], [1.3])
    expected = sum(component_loglik(data, i, (), params.components[0]) for i in range(5))
    assert_allclose(mixture_loglik(data, params), expected, atol=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
def test_mixture_collapses_for_identical_components(rng, alpha):
    data = _dataset(rng.standard_normal((6, 2)))
    two = mixture([alpha, 1 - alpha], [0.4, 0.4], [0.9, 0.9])
    one = mixture([1.0], [0.4], [0.9])
    assert_allclose(mixture_loglik(data, two), mixture_loglik(data, one), atol=1e-12)


def _mp_mixture_loglik(data, params, dps=50):
    alpha, mu, sig, beta, gamma = params.as_arrays()
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for i in range(data.n):
            acc = mpmath.mpf(0)
            for j in range(params.M):
                prod = mpmath.mpf(1)
                for t in range(data.T):
                    r = mpmath.mpf(float(data.y[i, t] - mu[j]))
                    if data.q:
                        r -= mpmath.mpf(float(data.x[i, t] @ beta[j]))
                    if data.p:
                        r -= mpmath.mpf(float(data.z[i, t] @ gamma))
                    s2 = mpmath.mpf(float(sig[j]))
                    prod *= mpmath.exp(-r * r / (2 * s2)) / mpmath.sqrt(2 * mpmath.pi * s2)
                acc += mpmath.mpf(float(alpha[j])) * prod
            total += mpmath.log(acc)
        return float(total)


def test_mixture_matches_brute_force_oracle(rng):
    data = _dataset(rng.standard_normal((5, 2)))
    params = mixture([0.2, 0.5, 0.3], [-1.0, 0.1, 2.0], [0.5, 1.0, 2.0])
    got = mixture_loglik(data, params)
    want = _mp_mixture_loglik(data, params)
    assert_allclose(got, want, rtol=1e-10)


def test_mixture_loglik_domain_errors(rng):
    data = _dataset(rng.standard_normal((3, 2)))
    good = mixture([0.5, 0.5], [0.0, 1.0], [1.0, 1.0])
    bad_alpha = np.array([0.7, 0.5])
    with pytest.raises(ValueError):
        MixtureParams(bad_alpha, good.components, good.gamma)


def test_mixture_invariant_under_component_permutation(rng):
    data = _dataset(rng.standard_normal((8, 3)))
    params = mixture([0.2, 0.3, 0.5], [-1.0, 0.0, 1.5], [0.7, 1.1, 2.0])
    base = mixture_loglik(data, params)
    alpha, mu, sig, beta, gamma = params.as_arrays()
    for _ in range(20):
        perm = rng.permutation(3)
        permuted = MixtureParams.from_arrays(alpha[perm], mu[perm], sig[perm], beta[perm], gamma)
        assert_allclose(mixture_loglik(data, permuted), base, atol=1e-12)


def test_alpha_one_ignores_other_component(rng):
    data = _dataset(rng.standard_normal((6, 2)))
    full = mixture([1.0, 0.0], [0.3, 99.0], [1.2, 7.0])
    expected = sum(component_loglik(data, i, (), full.components[0]) for i in range(6))
    assert_allclose(mixture_loglik(data, full), expected, atol=1e-12)


def test_logsumexp_stability_extreme_residuals(rng):
    y = 1000.0 * rng.standard_normal((5, 3))
    data = _dataset(y)
    params = mixture([0.5, 0.5], [-1.0, 1.0], [1.0, 2.0])
    got = mixture_loglik(data, params)
    assert np.isfinite(got)
    with mpmath.workprec(256):
        want = _mp_mixture_loglik(data, params, dps=80)
    assert_allclose(got, want, rtol=1e-8)


def test_canonicalize_identity_when_sorted():
    params = mixture([0.4, 0.6], [-1.0, 1.0], [1.0, 2.0])
    out = canonicalize(params)
    assert_allclose(out.alpha, params.alpha)
    assert [c.mu for c in out.components] == [-1.0, 1.0]


def test_canonicalize_swaps_and_carries_alpha():
    params = mixture([0.7, 0.3], [2.0, -2.0], [1.0, 3.0])
    out = canonicalize(params)
    assert [c.mu for c in out.components] == [-2.0, 2.0]
    assert_allclose(out.alpha, [0.3, 0.7])
    assert [c.sigma_sq for c in out.components] == [3.0, 1.0]


def test_canonicalize_mu_tie_broken_by_sigma():
    params = mixture([0.5, 0.5], [0.0, 0.0], [2.0, 1.0])
    out = canonicalize(params)
    assert [c.sigma_sq for c in out.components] == [1.0, 2.0]


def test_dataset_rejects_nonfinite_and_bad_shapes():
    with pytest.raises(ValueError):
        _dataset([[np.nan]])
    with pytest.raises(ValueError):
        PanelDataset(y=np.zeros((2, 2)), x=np.zeros((3, 2, 1)), z=np.zeros((2, 2, 0)))
    with pytest.raises(ValueError):
        PanelDataset(y=np.zeros((0, 2)), x=None, z=None)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=-3, max_value=3), st.floats(min_value=0.2, max_value=4))
def test_dataset_arrays_are_readonly(mu, sig):
    data = _dataset([[mu, mu]])
    with pytest.raises(ValueError):
        data.y[0, 0] = 1.0
    assert ComponentParams(mu, sig).sigma_sq == sig
