"""Domain types and densities for finite mixtures of normal panel regressions.

The observed data are a balanced panel: for each of ``n`` cross-section units
there are ``T`` periods, an outcome ``y``, ``q`` regressors ``x`` whose slopes
are component specific, and ``p`` regressors ``z`` whose slope ``gamma`` is
shared across components.  A mixture with ``M`` components has, for unit ``i``,

    f(W_i) = sum_j alpha_j * prod_t phi((y_it - mu_j - x_it'beta_j - z_it'gamma) / sigma_j) / sigma_j

All operations here are pure functions over immutable inputs; the arrays held
by :class:`PanelDataset` are marked read-only on construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))

ALPHA_SUM_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """An optimizer failed to produce a usable fit."""


class DegenerateRestrictionError(ValueError):
    """A mean-interval restriction collapsed (tied component means).

    Raised when a restricted fit is requested on intervals built from a null
    fit with tied means; the caller should reduce the number of components.
    """


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PanelDataset:
    """Balanced rectangular panel of outcomes and regressors.

    Parameters
    ----------
    y : ndarray, shape (n, T)
        Outcomes.
    x : ndarray, shape (n, T, q)
        Regressors with component-specific slopes (``q`` may be 0).
    z : ndarray, shape (n, T, p)
        Regressors with a common slope (``p`` may be 0).
    unit_ids : tuple
        Opaque labels, one per unit.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    unit_ids: tuple = ()

    def __post_init__(self):
        y = _readonly(np.atleast_2d(self.y))
        if y.ndim != 2:
            raise ValueError("y must be a 2-d (n, T) array")
        n, T = y.shape
        if n < 1 or T < 1:
            raise ValueError(f"need n >= 1 and T >= 1, got ({n}, {T})")
        x = _readonly(self.x if self.x is not None else np.zeros((n, T, 0)))
        z = _readonly(self.z if self.z is not None else np.zeros((n, T, 0)))
        if x.ndim != 3 or x.shape[:2] != (n, T):
            raise ValueError(f"x must have shape ({n}, {T}, q), got {x.shape}")
        if z.ndim != 3 or z.shape[:2] != (n, T):
            raise ValueError(f"z must have shape ({n}, {T}, p), got {z.shape}")
        for name, arr in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        ids = tuple(self.unit_ids) if self.unit_ids else tuple(range(n))
        if len(ids) != n:
            raise ValueError(f"unit_ids has length {len(ids)}, expected {n}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "unit_ids", ids)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.x.shape[2]

    @property
    def p(self) -> int:
        return self.z.shape[2]


@dataclass(frozen=True)
class ComponentParams:
    """One mixture component: intercept, variance and x-slopes."""

    mu: float
    sigma_sq: float
    beta: np.ndarray = ()

    def __post_init__(self):
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma_sq", float(self.sigma_sq))
        object.__setattr__(self, "beta", _readonly(np.atleast_1d(np.asarray(self.beta, dtype=float))))
        if not np.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if not (self.sigma_sq > 0.0 and np.isfinite(self.sigma_sq)):
            raise ValueError(f"sigma_sq must be positive and finite, got {self.sigma_sq}")

    @property
    def q(self) -> int:
        return self.beta.shape[0]


@dataclass(frozen=True)
class MixtureParams:
    """Full mixture parameter: proportions, components and common slope.

    ``alpha`` must be a probability vector (entries in [0, 1], summing to one
    within 1e-12).  Fitted results are reported in canonical order (means
    ascending, see :func:`canonicalize`); the ordering is not enforced here
    because intermediate EM iterates are legitimately unordered.
    """

    alpha: np.ndarray
    components: tuple
    gamma: np.ndarray = ()

    def __post_init__(self):
        alpha = _readonly(np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        comps = tuple(self.components)
        gamma = _readonly(np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        if alpha.ndim != 1 or alpha.shape[0] != len(comps):
            raise ValueError("alpha length must match the number of components")
        if len(comps) < 1:
            raise ValueError("need at least one component")
        if np.any(alpha < -ALPHA_SUM_TOL) or np.any(alpha > 1.0 + ALPHA_SUM_TOL):
            raise ValueError(f"mixing proportions outside [0, 1]: {alpha}")
        if abs(alpha.sum() - 1.0) > 1e-8:
            raise ValueError(f"mixing proportions sum to {alpha.sum()}, not 1")
        qs = {c.q for c in comps}
        if len(qs) != 1:
            raise ValueError("components disagree on the x-dimension")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "gamma", gamma)

    @property
    def M(self) -> int:
        return len(self.components)

    @property
    def q(self) -> int:
        return self.components[0].q

    @property
    def p(self) -> int:
        return self.gamma.shape[0]

    def as_arrays(self):
        """Return (alpha, mu, sigma_sq, beta, gamma) as dense arrays.

        ``beta`` has shape (M, q).  Convenient for vectorized density code.
        """
        mu = np.array([c.mu for c in self.components])
        sig = np.array([c.sigma_sq for c in self.components])
        beta = np.array([c.beta for c in self.components]).reshape(self.M, self.q)
        return np.asarray(self.alpha), mu, sig, beta, np.asarray(self.gamma)

    @staticmethod
    def from_arrays(alpha, mu, sigma_sq, beta, gamma) -> "MixtureParams":
        M = len(alpha)
        beta = np.asarray(beta, dtype=float).reshape(M, -1)
        comps = tuple(ComponentParams(mu[j], sigma_sq[j], beta[j]) for j in range(M))
        return MixtureParams(np.asarray(alpha, dtype=float), comps, np.asarray(gamma, dtype=float))


def residuals(data: PanelDataset, mu, beta, gamma) -> np.ndarray:
    """Residual array y - mu_j - x'beta_j - z'gamma, shape (n, T, M)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    M = mu.shape[0]
    beta = np.asarray(beta, dtype=float).reshape(M, data.q)
    gamma = np.asarray(gamma, dtype=float).reshape(data.p)
    base = data.y - (data.z @ gamma if data.p else 0.0)  # (n, T)
    fitted = mu[None, None, :] + (np.tensordot(data.x, beta.T, axes=([2], [0])) if data.q else 0.0)
    return base[:, :, None] - fitted


def loglik_matrix(data: PanelDataset, params: MixtureParams) -> np.ndarray:
    """Per-unit component log densities, shape (n, M).

    Entry (i, j) is log of the T-period product density of unit i under
    component j, i.e. sum_t [log phi(r_ijt / sigma_j) - log sigma_j].
    """
    _, mu, sig, beta, gamma = params.as_arrays()
    r = residuals(data, mu, beta, gamma)  # (n, T, M)
    ll = -0.5 * (LOG_2PI + np.log(sig)[None, None, :] + r * r / sig[None, None, :])
    return ll.sum(axis=1)


def component_loglik(data: PanelDataset, unit: int, gamma, theta: ComponentParams) -> float:
    """Log density of one unit under a single component.

    Raises
    ------
    IndexError
        If ``unit`` is out of range.
    ValueError
        On dimension mismatch or non-positive variance.
    """
    if not (0 <= unit < data.n):
        raise IndexError(f"unit {unit} out of range [0, {data.n})")
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.shape[0] != data.p:
        raise ValueError(f"gamma has length {gamma.shape[0]}, data has p={data.p}")
    if theta.q != data.q:
        raise ValueError(f"beta has length {theta.q}, data has q={data.q}")
    r = data.y[unit] - theta.mu - (data.x[unit] @ theta.beta if data.q else 0.0) \
        - (data.z[unit] @ gamma if data.p else 0.0)
    sig = theta.sigma_sq
    return float(np.sum(-0.5 * (LOG_2PI + np.log(sig) + r * r / sig)))


def _validate_mixture(data: PanelDataset, params: MixtureParams) -> None:
    if params.q != data.q or params.p != data.p:
        raise ValueError(
            f"parameter dimensions (q={params.q}, p={params.p}) do not match "
            f"data (q={data.q}, p={data.p})"
        )
    if np.any(np.asarray(params.alpha) < 0.0):
        raise ValueError("negative mixing proportion")
    if abs(float(np.sum(params.alpha)) - 1.0) > 1e-8:
        raise ValueError("mixing proportions do not sum to 1")


def mixture_loglik(data: PanelDataset, params: MixtureParams) -> float:
    """Mixture log likelihood sum_i log sum_j alpha_j f_j(W_i).

    Computed through log-sum-exp so that extreme residual magnitudes neither
    overflow nor collapse to -inf prematurely.
    """
    _validate_mixture(data, params)
    lm = loglik_matrix(data, params)
    with np.errstate(divide="ignore"):
        la = np.log(np.asarray(params.alpha))
    return float(np.sum(logsumexp(lm + la[None, :], axis=1)))


def posterior_weights(data: PanelDataset, params: MixtureParams) -> np.ndarray:
    """Posterior type probabilities w_ij = alpha_j f_j(W_i) / f_mix(W_i).

    Shape (n, M); rows sum to one.  Log-space throughout, so a unit that
    underflows every component still yields a proper row.
    """
    _validate_mixture(data, params)
    lm = loglik_matrix(data, params)
    with np.errstate(divide="ignore"):
        lw = lm + np.log(np.asarray(params.alpha))[None, :]
    lw -= logsumexp(lw, axis=1, keepdims=True)
    w = np.exp(lw)
    w /= w.sum(axis=1, keepdims=True)
    return w


def canonical_order(params: MixtureParams) -> np.ndarray:
    """Sorting permutation: mu ascending, ties by sigma_sq then beta."""
    _, mu, sig, beta, _ = params.as_arrays()
    keys = [beta[:, k] for k in range(beta.shape[1] - 1, -1, -1)]
    keys += [sig, mu]
    return np.lexsort(keys)


def canonicalize(params: MixtureParams) -> MixtureParams:
    """Permute components (and alpha) so the means ascend."""
    order = canonical_order(params)
    alpha, mu, sig, beta, gamma = params.as_arrays()
    return MixtureParams.from_arrays(alpha[order], mu[order], sig[order], beta[order], gamma)
