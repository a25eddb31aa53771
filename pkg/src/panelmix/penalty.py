"""Variance and proportion penalties, and the data-driven tuning constant a_n.

The variance penalty keeps EM away from the degenerate ridge of the mixture
likelihood (a component variance collapsing onto a single unit's residuals).
Its magnitude ``a_n`` is set from a calibrated logistic response surface in
(n, T) and, for two or more components, the misclassification probability of
the null model; with conditioning variables a table of fixed constants is used
instead.  The pair-split proportion penalty ``p_tau`` is used by the K-step
test updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import MixtureParams, posterior_weights

# Calibrated response-surface coefficients, one column per null component
# count: (intercept, 1/T, 1/n, logit(a_n), logit(omega)).  The omega term is
# absent for the one-component case.
AN_RHO_TABLE = {
    1: (-0.616, 0.776, 28.143, -0.016, None),
    2: (-0.811, -0.288, 4.637, -0.101, -0.197),
    3: (-0.680, 0.611, 21.156, -0.111, 0.002),
    4: (-0.735, 0.258, 8.585, -0.128, -0.013),
}

# Fixed constants for models with conditioning variables (5 and up: 0.5).
AN_COVARIATE_CONSTANTS = {1: 0.1617, 2: 0.0025, 3: 0.0567, 4: 0.4858}

AN_MIN = 0.005
AN_MAX = 0.5

OMEGA_MIN = 1e-3
OMEGA_MAX = 0.5


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty magnitude and per-component variance anchors.

    ``sigma0_sq`` holds one anchor per penalized component, or a single
    shared anchor that is broadcast.  ``an_mode`` records where ``a_n`` came
    from so reports can echo its provenance.
    """

    a_n: float
    sigma0_sq: np.ndarray
    an_mode: str = "user_fixed"  # formula | covariate_constants | user_fixed

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.sigma0_sq, dtype=float)).copy()
        a.setflags(write=False)
        object.__setattr__(self, "a_n", float(self.a_n))
        object.__setattr__(self, "sigma0_sq", a)
        if not self.a_n > 0:
            raise ValueError(f"a_n must be positive, got {self.a_n}")
        if np.any(a <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("all variance anchors must be positive and finite")
        if self.an_mode not in ("formula", "covariate_constants", "user_fixed"):
            raise ValueError(f"unknown an_mode {self.an_mode!r}")

    def anchors(self, M: int) -> np.ndarray:
        """Anchor vector of length M (broadcasting a shared anchor)."""
        a = self.sigma0_sq
        if a.shape[0] == M:
            return a
        if a.shape[0] == 1:
            return np.full(M, a[0])
        raise ValueError(f"{a.shape[0]} anchors cannot serve {M} components")


def pn_sigma(sigma_sq: float, sigma0_sq: float, a_n: float) -> float:
    """Variance penalty -a_n * (s0/s + log(s/s0) - 1).

    Nonpositive everywhere, zero only at sigma_sq == sigma0_sq, and divergent
    to -inf as sigma_sq -> 0, which is what rules out degenerate components.
    """
    if sigma_sq <= 0 or sigma0_sq <= 0:
        raise ValueError("variances must be positive")
    ratio = sigma0_sq / sigma_sq
    return -a_n * (ratio + math.log(sigma_sq / sigma0_sq) - 1.0)


def p_tau(tau: float) -> float:
    """Pair-split penalty log(2 min(tau, 1-tau)) on (0, 1)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie strictly in (0, 1), got {tau}")
    return math.log(2.0 * min(tau, 1.0 - tau))


def total_penalty(params: MixtureParams, cfg: PenaltyConfig) -> float:
    """Sum of per-component variance penalties under ``cfg``."""
    anchors = cfg.anchors(params.M)
    return float(sum(
        pn_sigma(c.sigma_sq, anchors[j], cfg.a_n) for j, c in enumerate(params.components)
    ))


def total_penalty_arrays(sigma_sq: np.ndarray, anchors: np.ndarray, a_n: float) -> float:
    """Vectorized :func:`total_penalty` used inside EM loops."""
    ratio = anchors / sigma_sq
    return float(-a_n * np.sum(ratio + np.log(sigma_sq / anchors) - 1.0))


def misclassification(params: MixtureParams, T: int, n_draws: int = 10_000, seed: int = 0) -> float:
    """Monte Carlo Bayes misclassification rate of a mixture panel model.

    Simulates ``n_draws`` units of length ``T`` from ``params`` (standard
    normal covariates), classifies each by posterior argmax, and returns the
    misclassified fraction clamped to [1e-3, 0.5].  Deterministic given
    ``seed``.
    """
    if params.M < 2:
        raise ValueError("misclassification requires at least two components")
    from .dgp import DGPSpec, generate_with_types  # deferred: dgp depends on model only

    spec = DGPSpec(params=params, n=int(n_draws), T=int(T), seed=int(seed))
    data, types = generate_with_types(spec)
    w = posterior_weights(data, params)
    assigned = np.argmax(w, axis=1)
    rate = float(np.mean(assigned != types))
    return float(min(max(rate, OMEGA_MIN), OMEGA_MAX))


def compute_an(M0: int, n: int, T: int, omega: float | None = None,
               has_covariates: bool = False) -> float:
    """Penalty magnitude for testing a null with ``M0`` components.

    Without covariates the calibrated logistic formula is evaluated with the
    coefficients in :data:`AN_RHO_TABLE` (``omega`` is required for
    2 <= M0 <= 4); with covariates the fixed constants apply.  The result is
    clamped to [0.005, 0.5], the range supported by the calibration grid.
    """
    if M0 < 1:
        raise ValueError(f"M0 must be at least 1, got {M0}")
    if has_covariates:
        value = AN_COVARIATE_CONSTANTS.get(M0, AN_MAX)
        return float(value)
    if M0 >= 5:
        return AN_MAX
    rho1, rho2, rho3, rho4, rho5 = AN_RHO_TABLE[M0]
    expo = rho1 + rho2 / T + rho3 / n
    if M0 >= 2:
        if omega is None:
            raise ValueError("omega is required for M0 >= 2 without covariates")
        w = min(max(float(omega), OMEGA_MIN), OMEGA_MAX)
        expo += rho5 * math.log(w / (1.0 - w))
    value = 1.0 / (1.0 + math.exp(expo / rho4))
    return float(min(max(value, AN_MIN), AN_MAX))
