import numpy as np
import pytest

from panelmix import DGPSpec, MixtureParams, generate


def mixture(alpha, mu, sigma_sq, beta=None, gamma=()):
    alpha = np.asarray(alpha, dtype=float)
    M = alpha.shape[0]
    if beta is None:
        beta = np.zeros((M, 0))
    return MixtureParams.from_arrays(alpha, np.asarray(mu, dtype=float),
                                     np.asarray(sigma_sq, dtype=float),
                                     np.asarray(beta, dtype=float), np.asarray(gamma, dtype=float))


def simulate(alpha, mu, sigma_sq, n, T, seed, beta=None, gamma=()):
    return generate(DGPSpec(params=mixture(alpha, mu, sigma_sq, beta, gamma),
                            n=n, T=T, seed=seed))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
