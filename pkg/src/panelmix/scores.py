"""Hermite-polynomial score vectors and empirical information matrices.

Testing whether two components coincide reparameterizes the pair into its
weighted mean and difference; the first derivative in the difference direction
vanishes at the null, so identification runs through second derivatives of the
component density.  For a normal panel density those derivatives are sums of
products of scaled Hermite polynomials of the standardized residuals:

    H_scaled(b) = H^b(u / sigma) / (b! * sigma^b)

With T periods, a second derivative of the product density splits into a
same-period term and a cross-period term, e.g.

    d2f/dmu2 / f = 2 sum_t H2_t + sum_t sum_{s != t} H1_t H1_s

Score rows are per unit; the empirical information matrix is their mean outer
product, partitioned into the regular block (eta) and the second-order block
(lambda), with the testing covariance given by the Schur complement.

Column layout of the lambda block (one block per split location h, q = number
of x regressors, d = q + 2 coordinates ordered mu, sigma_sq, beta_1..beta_q):

    (mu,mu), (mu,sigma), (sigma,sigma),
    (mu,beta_k)    for k = 1..q,
    (sigma,beta_k) for k = 1..q,
    (beta_k,beta_k) for k = 1..q, then (beta_j,beta_k) for j < k row-major

which has (q+2)(q+3)/2 entries.  The cone machinery uses a different order
(all squares first); :func:`score_to_vmap_permutation` bridges the two.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import ComponentParams, MixtureParams, PanelDataset, loglik_matrix, posterior_weights

_FACTORIALS = (1.0, 1.0, 2.0, 6.0, 24.0)


def hermite(j: int, t):
    """Probabilists' Hermite polynomial of order 1..4 evaluated at t."""
    t = np.asarray(t, dtype=float)
    if j == 1:
        return t
    if j == 2:
        return t * t - 1.0
    if j == 3:
        return t * (t * t - 3.0)
    if j == 4:
        t2 = t * t
        return t2 * (t2 - 6.0) + 3.0
    raise ValueError(f"Hermite order must be in 1..4, got {j}")


def hermite_scaled(b: int, residual, sigma: float):
    """H^b(residual/sigma) / (b! sigma^b), the derivative building block.

    With this scaling the first-order mean score is exactly H_scaled(1) and
    the variance score exactly H_scaled(2).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return hermite(b, np.asarray(residual, dtype=float) / sigma) / (_FACTORIALS[b] * sigma ** b)


def lambda_block_dim(q: int) -> int:
    """Number of lambda-block columns, (q+2)(q+3)/2."""
    return (q + 2) * (q + 3) // 2


def lambda_index_pairs(q: int):
    """Coordinate pairs of the lambda block in score (display) order.

    Coordinates are 0 = mu, 1 = sigma_sq, 2..q+1 = beta.
    """
    d = q + 2
    pairs = [(0, 0), (0, 1), (1, 1)]
    pairs += [(0, k) for k in range(2, d)]
    pairs += [(1, k) for k in range(2, d)]
    pairs += [(k, k) for k in range(2, d)]
    pairs += [(j, k) for j in range(2, d) for k in range(j + 1, d)]
    return pairs


def vmap_index_pairs(d: int):
    """Coordinate pairs in cone order: all squares, then upper triangle row-major."""
    pairs = [(j, j) for j in range(d)]
    pairs += [(j, k) for j in range(d) for k in range(j + 1, d)]
    return pairs


def score_to_vmap_permutation(q: int) -> np.ndarray:
    """Permutation P with x_vmap = x_score[P] for one lambda block."""
    score_pairs = lambda_index_pairs(q)
    lookup = {pair: i for i, pair in enumerate(score_pairs)}
    return np.array([lookup[pair] for pair in vmap_index_pairs(q + 2)], dtype=int)


@dataclass(frozen=True)
class ScoreBundle:
    """Per-unit score rows, split into the eta and lambda blocks.

    ``block_index`` maps split location h (1-based) to the column range of
    its lambda block inside ``s_lambda``.
    """

    s_eta: np.ndarray
    s_lambda: np.ndarray
    d_eta: int
    d_lam: int
    M0: int
    q: int
    block_index: dict
    eta_labels: tuple = ()
    lambda_labels: tuple = ()

    @property
    def n(self) -> int:
        return self.s_eta.shape[0]

    def lambda_block(self, h: int) -> np.ndarray:
        """Columns of split location h (1-based)."""
        sl = self.block_index[h]
        return self.s_lambda[:, sl]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # sum_t sum_{s != t} a_t b_s, vectorized over the unit axis
    return a.sum(axis=1) * b.sum(axis=1) - (a * b).sum(axis=1)


def _hermite_stack(u: np.ndarray, sigma: float):
    t = u / sigma
    h1 = t / sigma
    h2 = (t * t - 1.0) / (2.0 * sigma ** 2)
    h3 = t * (t * t - 3.0) / (6.0 * sigma ** 3)
    t2 = t * t
    h4 = (t2 * (t2 - 6.0) + 3.0) / (24.0 * sigma ** 4)
    return h1, h2, h3, h4


def _lambda_columns(h1, h2, h3, h4, x: np.ndarray) -> np.ndarray:
    """Assemble the (n, d_lam) lambda block from scaled Hermite stacks."""
    n, _ = h1.shape
    q = x.shape[2]
    cols = [
        h2.sum(axis=1) + 0.5 * _cross(h1, h1),
        3.0 * h3.sum(axis=1) + _cross(h1, h2),
        3.0 * h4.sum(axis=1) + 0.5 * _cross(h2, h2),
    ]
    for k in range(q):
        xk = x[:, :, k]
        cols.append(2.0 * (h2 * xk).sum(axis=1) + _cross(h1 * xk, h1))
    for k in range(q):
        xk = x[:, :, k]
        # exact d2/(dsigma2 dbeta): per-period 3*H3*x, single cross sum
        cols.append(3.0 * (h3 * xk).sum(axis=1) + _cross(h2, h1 * xk))
    for k in range(q):
        xk = x[:, :, k]
        cols.append((h2 * xk * xk).sum(axis=1) + 0.5 * _cross(h1 * xk, h1 * xk))
    for j in range(q):
        for k in range(j + 1, q):
            xj, xk = x[:, :, j], x[:, :, k]
            cols.append(2.0 * (h2 * xj * xk).sum(axis=1) + _cross(h1 * xj, h1 * xk))
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _lambda_labels(q: int, h: int):
    names = ["mu", "sigma"] + [f"beta{k + 1}" for k in range(q)]
    return tuple(f"h{h}:{names[a]}*{names[b]}" for a, b in lambda_index_pairs(q))


def score_homogeneity(data: PanelDataset, gamma, theta: ComponentParams) -> ScoreBundle:
    """Scores for testing one component against two, at a one-component fit.

    eta columns: (mu, sigma_sq, beta, gamma); a single lambda block.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.shape[0] != data.p or theta.q != data.q:
        raise ValueError("parameter dimensions do not match the data")
    u = data.y - theta.mu - (data.x @ theta.beta if data.q else 0.0) \
        - (data.z @ gamma if data.p else 0.0)
    sigma = float(np.sqrt(theta.sigma_sq))
    h1, h2, h3, h4 = _hermite_stack(u, sigma)

    eta_cols = [h1.sum(axis=1), h2.sum(axis=1)]
    eta_labels = ["mu", "sigma"]
    for k in range(data.q):
        eta_cols.append((h1 * data.x[:, :, k]).sum(axis=1))
        eta_labels.append(f"beta{k + 1}")
    for k in range(data.p):
        eta_cols.append((h1 * data.z[:, :, k]).sum(axis=1))
        eta_labels.append(f"gamma{k + 1}")
    s_eta = np.column_stack(eta_cols)
    s_lambda = _lambda_columns(h1, h2, h3, h4, data.x)
    d_lam = lambda_block_dim(data.q)
    return ScoreBundle(
        s_eta=s_eta, s_lambda=s_lambda, d_eta=s_eta.shape[1], d_lam=d_lam,
        M0=1, q=data.q, block_index={1: slice(0, d_lam)},
        eta_labels=tuple(eta_labels), lambda_labels=_lambda_labels(data.q, 1),
    )


def score_general(data: PanelDataset, null_fit: MixtureParams) -> ScoreBundle:
    """Scores for testing M0 components against M0 + 1, at the M0 null fit.

    eta columns: M0 - 1 proportion contrasts (f_j - f_M0) / f_mix, then the
    posterior-weighted per-type (mu_j, sigma_j_sq, beta_j) columns, then the
    gamma columns (weighted sums over types).  One lambda block per h, each
    the posterior-weighted homogeneity block evaluated at component h.
    """
    M0 = null_fit.M
    if M0 < 2:
        raise ValueError("score_general requires M0 >= 2; use score_homogeneity")
    order = np.array([c.mu for c in null_fit.components])
    if np.any(np.diff(order) < 0):
        raise ValueError("null fit must be canonical (means ascending)")
    alpha, mu, sig, beta, gamma = null_fit.as_arrays()
    lm = loglik_matrix(data, null_fit)
    with np.errstate(divide="ignore"):
        lmix = logsumexp(lm + np.log(alpha)[None, :], axis=1)
    ratio = np.exp(lm - lmix[:, None])            # f_j / f_mix
    w = posterior_weights(data, null_fit)         # alpha_j f_j / f_mix

    eta_cols, eta_labels = [], []
    for j in range(M0 - 1):
        eta_cols.append(ratio[:, j] - ratio[:, M0 - 1])
        eta_labels.append(f"alpha{j + 1}")

    stacks = []
    for j in range(M0):
        u = data.y - mu[j] - (data.x @ beta[j] if data.q else 0.0) \
            - (data.z @ gamma if data.p else 0.0)
        stacks.append(_hermite_stack(u, float(np.sqrt(sig[j]))))
    for j in range(M0):
        h1, h2, _, _ = stacks[j]
        eta_cols.append(w[:, j] * h1.sum(axis=1))
        eta_labels.append(f"mu[{j + 1}]")
        eta_cols.append(w[:, j] * h2.sum(axis=1))
        eta_labels.append(f"sigma[{j + 1}]")
        for k in range(data.q):
            eta_cols.append(w[:, j] * (h1 * data.x[:, :, k]).sum(axis=1))
            eta_labels.append(f"beta{k + 1}[{j + 1}]")
    for k in range(data.p):
        col = np.zeros(data.n)
        for j in range(M0):
            col += w[:, j] * (stacks[j][0] * data.z[:, :, k]).sum(axis=1)
        eta_cols.append(col)
        eta_labels.append(f"gamma{k + 1}")
    s_eta = np.column_stack(eta_cols)

    d_lam = lambda_block_dim(data.q)
    blocks, block_index, lam_labels = [], {}, []
    for h in range(M0):
        h1, h2, h3, h4 = stacks[h]
        blocks.append(w[:, h][:, None] * _lambda_columns(h1, h2, h3, h4, data.x))
        block_index[h + 1] = slice(h * d_lam, (h + 1) * d_lam)
        lam_labels.extend(_lambda_labels(data.q, h + 1))
    s_lambda = np.hstack(blocks)
    return ScoreBundle(
        s_eta=s_eta, s_lambda=s_lambda, d_eta=s_eta.shape[1], d_lam=d_lam,
        M0=M0, q=data.q, block_index=block_index,
        eta_labels=tuple(eta_labels), lambda_labels=tuple(lam_labels),
    )


@dataclass(frozen=True)
class InformationBlocks:
    """Empirical information matrix with its eta/lambda partition.

    ``I_schur`` is the lambda-block covariance after projecting out the eta
    directions; ``per_h`` holds its diagonal blocks, one per split location.
    """

    I_full: np.ndarray
    I_eta: np.ndarray
    I_lambda_eta: np.ndarray
    I_lambda_lambda: np.ndarray
    I_schur: np.ndarray
    per_h: tuple
    d_eta: int
    d_lam: int
    M0: int
    q: int


def _floored_inverse(mat: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.maximum(vals, floor)
    return (vecs / vals) @ vecs.T


def information(bundle: ScoreBundle) -> InformationBlocks:
    """Mean outer product of score rows and its Schur complement.

    The eta block is inverted through an eigenvalue-floored pseudo-inverse
    (floor 1e-10 * trace / d_eta); near-singular eta blocks arise at small n.
    """
    n = bundle.n
    if n < 2:
        raise ValueError("need at least two score rows")
    total = bundle.d_eta + bundle.M0 * bundle.d_lam
    if n <= total:
        warnings.warn(
            f"only n={n} rows for a {total}-column information matrix; "
            "estimates will be noisy", stacklevel=2)
    S = np.hstack([bundle.s_eta, bundle.s_lambda])
    I_full = S.T @ S / n
    I_full = 0.5 * (I_full + I_full.T)
    de = bundle.d_eta
    I_eta = I_full[:de, :de]
    I_le = I_full[de:, :de]
    I_ll = I_full[de:, de:]
    floor = 1e-10 * max(np.trace(I_eta), 1e-300) / max(de, 1)
    inv_eta = _floored_inverse(I_eta, floor)
    I_schur = I_ll - I_le @ inv_eta @ I_le.T
    I_schur = 0.5 * (I_schur + I_schur.T)
    per_h = []
    for h in range(bundle.M0):
        sl = slice(h * bundle.d_lam, (h + 1) * bundle.d_lam)
        per_h.append(I_schur[sl, sl])
    return InformationBlocks(
        I_full=I_full, I_eta=I_eta, I_lambda_eta=I_le, I_lambda_lambda=I_ll,
        I_schur=I_schur, per_h=tuple(per_h),
        d_eta=de, d_lam=bundle.d_lam, M0=bundle.M0, q=bundle.q,
    )
