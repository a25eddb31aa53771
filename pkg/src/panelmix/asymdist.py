"""Monte Carlo simulation of the limiting null distribution of the tests.

Each draw projects a Gaussian vector onto the cone of scaled rank-one
outer-product vectors {c * vmap(u) : c >= 0, |u| = 1}, once per split
location, and takes the maximum of the resulting quadratic forms.  Because
vmap(c u) = c^2 vmap(u), the cone is exactly the image of R^d under vmap, so
the projection can be run as a smooth unconstrained search in the direction
variable with the optimal scale available in closed form:

    s*(u) = max(0, v'I G / v'I v),  v = vmap(u)

and the projected quadratic form is max_u s*(u)^2 v'I v.  All randomness for
one distribution comes from a single seeded generator in a fixed order, so
results do not depend on execution order or worker count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .scores import InformationBlocks, score_to_vmap_permutation, vmap_index_pairs


class NonPSDError(RuntimeError):
    """The estimated testing covariance is indefinite beyond repair.

    Usually a sample-size problem: the empirical information matrix needs
    more units than score columns to be positive semidefinite.
    """


@dataclass(frozen=True)
class NullDistribution:
    """Sorted Monte Carlo sample of the limiting statistic with quantiles."""

    samples: np.ndarray
    n_draws: int
    M0: int
    seed: int
    levels: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.samples, fmt="%.17g", header="draw", comments="")


def vmap(lam) -> np.ndarray:
    """Unique entries of lam lam': all squares, then upper triangle row-major."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    d = lam.shape[0]
    return np.array([lam[a] * lam[b] for a, b in vmap_index_pairs(d)])


def _vmap_columns(U: np.ndarray) -> np.ndarray:
    """vmap applied to each column of U (d, K) -> (d(d+1)/2, K)."""
    d = U.shape[0]
    return np.array([U[a] * U[b] for a, b in vmap_index_pairs(d)])


def _vmap_jacobian(w: np.ndarray) -> np.ndarray:
    d = w.shape[0]
    pairs = vmap_index_pairs(d)
    J = np.zeros((len(pairs), d))
    for row, (a, b) in enumerate(pairs):
        J[row, a] += w[b]
        J[row, b] += w[a]
    return J


def _repair_psd(I: np.ndarray, warn_label: str):
    I = 0.5 * (I + I.T)
    vals, vecs = np.linalg.eigh(I)
    vmax = float(vals.max())
    if vmax <= 0:
        raise NonPSDError(f"{warn_label}: matrix has no positive eigenvalue")
    if vals.min() < -1e-6 * vmax:
        raise NonPSDError(
            f"{warn_label}: indefinite (min eig {vals.min():.3e} vs max {vmax:.3e}); "
            "increase the sample size")
    clipped = vals.min() < 1e-12 * vmax
    if clipped:
        warnings.warn(f"{warn_label}: clipping near-zero eigenvalues", stacklevel=3)
    vals = np.maximum(vals, 1e-12 * vmax)
    return vals, vecs, clipped


_RANDOM_DIRECTIONS: dict = {}


def _fixed_random_directions(d: int, count: int = 32) -> np.ndarray:
    key = (d, count)
    if key not in _RANDOM_DIRECTIONS:
        rng = np.random.default_rng(np.random.SeedSequence((98765, d, count)))
        U = rng.standard_normal((count, d))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        _RANDOM_DIRECTIONS[key] = U
    return _RANDOM_DIRECTIONS[key]


def _direction_grid(d: int, resolution: int = 900) -> np.ndarray:
    """Quasi-uniform unit directions, shape (d, K).  Half spaces suffice
    because vmap(-u) = vmap(u)."""
    if d == 2:
        theta = np.linspace(0.0, np.pi, resolution, endpoint=False)
        return np.vstack([np.cos(theta), np.sin(theta)])
    if d == 3:
        k = np.arange(2048)
        phi = math.pi * (3.0 - math.sqrt(5.0)) * k
        zc = 1.0 - 2.0 * (k + 0.5) / 2048
        r = np.sqrt(np.maximum(1.0 - zc * zc, 0.0))
        return np.vstack([r * np.cos(phi), r * np.sin(phi), zc])
    rng = np.random.default_rng(np.random.SeedSequence((24680, d)))
    U = rng.standard_normal((4096, d))
    return (U / np.linalg.norm(U, axis=1, keepdims=True)).T


def _grid_gains(I: np.ndarray, G_rows: np.ndarray, V: np.ndarray):
    """Best closed-form-scale gain over grid directions for each row of G."""
    IV = I @ V
    qv = np.einsum("mk,mk->k", V, IV)
    safe = np.maximum(qv, 1e-300)
    cross = np.clip(G_rows @ IV, 0.0, None)
    gains = np.where(qv > 0, cross * cross / safe, 0.0)
    idx = np.argmax(gains, axis=1)
    return gains[np.arange(G_rows.shape[0]), idx], idx


def _gain_at_angles(I: np.ndarray, G_rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
    U = np.vstack([np.cos(theta), np.sin(theta)])
    V = _vmap_columns(U)  # (3, n)
    IV = I @ V
    qv = np.einsum("mk,mk->k", V, IV)
    cross = np.clip(np.einsum("nm,mn->n", G_rows, IV), 0.0, None)
    return np.where(qv > 0, cross * cross / np.maximum(qv, 1e-300), 0.0)


def _refine_angles(I: np.ndarray, G_rows: np.ndarray, theta0: np.ndarray,
                   half_width: float, iters: int = 60) -> np.ndarray:
    """Vectorized golden-section polish of per-row best angles."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a = theta0 - half_width
    b = theta0 + half_width
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc = _gain_at_angles(I, G_rows, c)
    fd = _gain_at_angles(I, G_rows, d)
    for _ in range(iters):
        take_c = fc >= fd
        b = np.where(take_c, d, b)
        a = np.where(take_c, a, c)
        c = b - inv_phi * (b - a)
        d = a + inv_phi * (b - a)
        fc = _gain_at_angles(I, G_rows, c)
        fd = _gain_at_angles(I, G_rows, d)
    return 0.5 * (a + b)


def _anchored_projection(I: np.ndarray, G_rows: np.ndarray, U_best: np.ndarray):
    """Closed-form scale at given per-row directions; returns (t_hat, gain)."""
    V = _vmap_columns(U_best.T).T  # (n, m)
    IV = V @ I
    qv = np.einsum("nm,nm->n", V, IV)
    cross = np.einsum("nm,nm->n", IV, G_rows)
    s = np.where(qv > 0, np.clip(cross, 0.0, None) / np.maximum(qv, 1e-300), 0.0)
    t_hat = s[:, None] * V
    gain = s * s * qv
    return t_hat, gain


def _gain_at_directions(I: np.ndarray, G_rows: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Per-row gain at per-row directions; U is (n, d)."""
    V = _vmap_columns(U.T).T  # (n, m)
    IV = V @ I
    qv = np.einsum("nm,nm->n", V, IV)
    cross = np.clip(np.einsum("nm,nm->n", IV, G_rows), 0.0, None)
    return np.where(qv > 0, cross * cross / np.maximum(qv, 1e-300), 0.0)


def _tangent_basis(U: np.ndarray) -> np.ndarray:
    """Orthonormal basis of each row's orthogonal complement, (n, d, d-1).

    Householder reflectors mapping e1 onto each direction; columns 2..d of
    the reflector span the tangent space.
    """
    n, d = U.shape
    sign = np.where(U[:, 0] >= 0, 1.0, -1.0)
    v = U.copy()
    v[:, 0] += sign
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    B = -2.0 * v[:, :, None] * v[:, None, 1:]
    B[:, 1:, :] += np.eye(d)[1:, 1:]
    return B


def _refine_directions_newton(I: np.ndarray, G_rows: np.ndarray, U0: np.ndarray,
                              iters: int = 8, h: float = 3e-5) -> np.ndarray:
    """Batched finite-difference Newton on the direction sphere.

    Refines every row's direction simultaneously through a local tangent
    parameterization; steps that fail to improve are halved once and then
    dropped, so the refined gain never falls below the grid gain.
    """
    n, d = U0.shape
    k = d - 1
    U = U0.copy()
    gain = _gain_at_directions(I, G_rows, U)
    active = gain > 0

    def at(S):
        W = U + np.einsum("ndk,nk->nd", _B, S)
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        return W

    for _ in range(iters):
        if not active.any():
            break
        _B = _tangent_basis(U)
        grad = np.zeros((n, k))
        hess = np.zeros((n, k, k))
        for i in range(k):
            e = np.zeros((n, k))
            e[:, i] = h
            gp = _gain_at_directions(I, G_rows, at(e))
            gm = _gain_at_directions(I, G_rows, at(-e))
            grad[:, i] = (gp - gm) / (2 * h)
            hess[:, i, i] = (gp - 2 * gain + gm) / (h * h)
        for i in range(k):
            for j in range(i + 1, k):
                e = np.zeros((n, k))
                e[:, i] = h
                e[:, j] = h
                gpp = _gain_at_directions(I, G_rows, at(e))
                e[:, j] = -h
                gpm = _gain_at_directions(I, G_rows, at(e))
                e[:, i] = -h
                gmm = _gain_at_directions(I, G_rows, at(e))
                e[:, j] = h
                gmp = _gain_at_directions(I, G_rows, at(e))
                hess[:, i, j] = hess[:, j, i] = (gpp - gpm - gmp + gmm) / (4 * h * h)
        ridge = 1e-8 * (1.0 + np.abs(hess).max(axis=(1, 2), keepdims=True))
        neg = -hess + ridge * np.eye(k)
        try:
            step = np.linalg.solve(neg, grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.zeros_like(grad)
        norms = np.linalg.norm(step, axis=1, keepdims=True)
        step = np.where(norms > 0.2, step * (0.2 / np.maximum(norms, 1e-300)), step)
        step[~active] = 0.0
        for _half in range(2):
            U_try = at(step)
            g_try = _gain_at_directions(I, G_rows, U_try)
            improve = g_try >= gain
            U = np.where(improve[:, None], U_try, U)
            gain = np.where(improve, g_try, gain)
            step = np.where(improve[:, None], 0.0, 0.5 * step)
    return U


def _project_rows(I: np.ndarray, G_rows: np.ndarray, d: int, polish: bool = True):
    """Cone projection of each row of G in the metric I.

    Returns (t_hat rows, gains) with gain = t'I t = G'I G - r_min.
    """
    U = _direction_grid(d)
    _, idx = _grid_gains(I, G_rows, _vmap_columns(U))
    U_best = U[:, idx].T  # (n, d)
    if d == 2 and polish:
        theta = np.arctan2(U_best[:, 1], U_best[:, 0])
        spacing = np.pi / U.shape[1]
        theta = _refine_angles(I, G_rows, theta, spacing)
        U_best = np.vstack([np.cos(theta), np.sin(theta)]).T
    elif polish:
        U_best = _refine_directions_newton(I, G_rows, U_best)
    return _anchored_projection(I, G_rows, U_best)


def _cone_objective(w: np.ndarray, I: np.ndarray, G: np.ndarray):
    v = vmap(w)
    diff = v - G
    Idiff = I @ diff
    return float(diff @ Idiff), 2.0 * (_vmap_jacobian(w).T @ Idiff)


def _polish_direction(I: np.ndarray, G: np.ndarray, u0: np.ndarray) -> np.ndarray:
    qv = float(vmap(u0) @ I @ vmap(u0))
    cross = float(vmap(u0) @ I @ G)
    s0 = max(cross / qv, 0.0) if qv > 0 else 0.0
    w0 = math.sqrt(s0) * u0 if s0 > 0 else 1e-3 * u0
    res = minimize(_cone_objective, w0, args=(I, G), jac=True, method="L-BFGS-B",
                   options={"maxiter": 200, "ftol": 1e-15, "gtol": 1e-12})
    norm = np.linalg.norm(res.x)
    return res.x / norm if norm > 0 else u0


def _symmetrized_matrix(G: np.ndarray, d: int) -> np.ndarray:
    S = np.zeros((d, d))
    for val, (a, b) in zip(G, vmap_index_pairs(d)):
        if a == b:
            S[a, a] = val
        else:
            S[a, b] = S[b, a] = 0.5 * val
    return S


def project_cone(G, I, d: int):
    """Projection of G onto the outer-product cone in the metric I.

    Multi-start quasi-Newton search over cone points v(w) (seeded from the
    leading eigenvector of the symmetrized matrix form of G plus 32 fixed
    random directions), with a 1-degree angular grid refinement for d = 2.
    The returned point carries the exact closed-form scale, so the
    complementarity identity t'I(G - t) = 0 holds to rounding.

    Returns
    -------
    (t_hat, r_min) : minimizing cone point and its squared distance.
    """
    G = np.asarray(G, dtype=float)
    m = d * (d + 1) // 2
    if G.shape != (m,):
        raise ValueError(f"G must have length d(d+1)/2 = {m}")
    I = np.asarray(I, dtype=float)
    if I.shape != (m, m):
        raise ValueError(f"I must be {m}x{m}")
    vals, vecs, _ = _repair_psd(I, "project_cone")
    I = (vecs * vals) @ vecs.T

    candidates = []
    S = _symmetrized_matrix(G, d)
    evals, evecs = np.linalg.eigh(S)
    lead = evecs[:, -1]
    scale = math.sqrt(max(float(evals[-1]), 1e-6))
    candidates.append(scale * lead)
    for u in _fixed_random_directions(d):
        candidates.append(u)

    best_w, best_val = None, np.inf
    for w0 in candidates:
        res = minimize(_cone_objective, w0, args=(I, G), jac=True, method="L-BFGS-B",
                       options={"maxiter": 300, "ftol": 1e-15, "gtol": 1e-12})
        if res.fun < best_val:
            best_val, best_w = float(res.fun), res.x

    norm = np.linalg.norm(best_w)
    u_best = best_w / norm if norm > 0 else np.ones(d) / math.sqrt(d)
    if d == 2:
        theta_grid = np.linspace(0.0, np.pi, 180, endpoint=False)
        G_tiled = np.repeat(G[None, :], theta_grid.shape[0], axis=0)
        gains = _gain_at_angles(I, G_tiled, theta_grid)
        t0 = theta_grid[int(np.argmax(gains))]
        t_ref = _refine_angles(I, G[None, :], np.array([t0]), np.pi / 180)[0]
        u_grid = np.array([math.cos(t_ref), math.sin(t_ref)])
        gain_grid = _anchored_projection(I, G[None, :], u_grid[None, :])[1][0]
        gain_newton = _anchored_projection(I, G[None, :], u_best[None, :])[1][0]
        if gain_grid > gain_newton:
            u_best = u_grid

    t_hat, gain = _anchored_projection(I, G[None, :], u_best[None, :])
    t_hat = t_hat[0]
    diff = t_hat - G
    r_min = float(diff @ I @ diff)
    r_zero = float(G @ I @ G)
    if r_zero < r_min:
        return np.zeros(m), r_zero
    return t_hat, r_min


def simulate_null(info: InformationBlocks, M0: int, n_draws: int, seed: int = 0,
                  check_tol: float = 1e-6) -> NullDistribution:
    """Monte Carlo sample of max_h t_h' I_h t_h under the null.

    One jointly Gaussian vector per draw with the full Schur-complement
    covariance across the h blocks (the blocks are correlated), then a cone
    projection per block.  The per-draw complementarity identity
    |t'I t - (G'I G - r_min)| <= tol (1 + G'I G) is verified and violations
    are counted in the diagnostics.
    """
    if M0 != info.M0:
        raise ValueError(f"info was built for M0={info.M0}, got {M0}")
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    d = info.q + 2
    dl = info.d_lam
    vals, vecs, clipped = _repair_psd(info.I_schur, "simulate_null covariance")
    C = (vecs * vals) @ vecs.T
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(C + (1e-12 * vals.max()) * np.eye(C.shape[0]))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    Z = rng.standard_normal((n_draws, M0 * dl))
    S = Z @ L.T

    perm = score_to_vmap_permutation(info.q)
    draws = np.full(n_draws, -np.inf)
    violations = 0
    max_gap = 0.0
    for h in range(M0):
        Ih = info.per_h[h][np.ix_(perm, perm)]
        hv, hV, _ = _repair_psd(Ih, f"simulate_null block {h + 1}")
        Ih = (hV * hv) @ hV.T
        inv = (hV / hv) @ hV.T
        Sh = S[:, h * dl:(h + 1) * dl][:, perm]
        G = Sh @ inv.T
        t_hat, gain = _project_rows(Ih, G, d)
        diff = t_hat - G
        r_min = np.einsum("nm,mk,nk->n", diff, Ih, diff)
        gig = np.einsum("nm,mk,nk->n", G, Ih, G)
        gap = np.abs(gain - (gig - r_min)) / (1.0 + gig)
        max_gap = max(max_gap, float(gap.max()))
        violations += int(np.sum(gap > check_tol))
        draws = np.maximum(draws, gain)
    if violations:
        warnings.warn(f"{violations} draws violated cone complementarity", stacklevel=2)

    samples = np.sort(draws)
    dist = NullDistribution(
        samples=samples, n_draws=n_draws, M0=M0, seed=seed,
        levels={}, diagnostics={
            "complementarity_violations": violations,
            "max_complementarity_gap": max_gap,
            "covariance_clipped": clipped,
        },
    )
    for sig_level in (0.10, 0.05, 0.01):
        dist.levels[sig_level] = critical_value(dist, 1.0 - sig_level)
    return dist


def critical_value(dist: NullDistribution, level: float) -> float:
    """Empirical quantile, right-continuous inverted ECDF convention."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    n = dist.samples.shape[0]
    k = min(max(int(math.ceil(n * level)), 1), n)
    return float(dist.samples[k - 1])


def p_value(dist: NullDistribution, stat: float) -> float:
    """Add-one smoothed upper tail fraction (k + 1) / (n + 1)."""
    n = dist.samples.shape[0]
    k = int(np.sum(dist.samples >= stat))
    return (k + 1.0) / (n + 1.0)
