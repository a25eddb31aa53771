"""Penalized EM estimation for normal panel mixtures.

Covers the unrestricted penalized MLE for any component count, the
mean-interval / pair-split restricted fits used by the component-count tests,
and the short generalized-EM rounds that update the within-pair proportion
with its own penalty.

Every M-step block is an exact conditional maximizer of the penalized
complete-data objective (coordinate ascent), so the penalized log likelihood
is non-decreasing along every trajectory: proportions in closed form (with an
exact floored-simplex argmax when a floor is active), the common slope by
precision-weighted normal equations, per-component location parameters by
weighted least squares with face re-solve when an interval clamp binds, and
variances by the penalized closed form

    sigma_j^2 = (SSR_j + 2 a_n anchor_j) / (W_j T + 2 a_n).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import (
    ConvergenceError,
    DegenerateRestrictionError,
    MixtureParams,
    PanelDataset,
    canonical_order,
    posterior_weights,
    residuals,
)
from .model import LOG_2PI
from .penalty import PenaltyConfig, p_tau, total_penalty_arrays

_DEAD_WEIGHT = 1e-10


@dataclass(frozen=True)
class EMConfig:
    """Knobs for the EM fits and the test's short-EM stage."""

    max_iter: int = 2000
    tol: float = 1e-8
    n_starts: int = 10
    epsilon_alpha: float = 0.05
    K: int = 3
    tau_set: tuple = (0.1, 0.3, 0.5)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon_alpha < 0.5:
            raise ValueError("epsilon_alpha must lie in (0, 0.5)")
        taus = tuple(float(t) for t in self.tau_set)
        if not taus or any(not 0.0 < t <= 0.5 for t in taus):
            raise ValueError("tau_set must be a subset of (0, 0.5]")
        if 0.5 not in taus:
            raise ValueError("tau_set must contain 0.5")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        object.__setattr__(self, "tau_set", taus)


@dataclass(frozen=True)
class FitResult:
    """A converged (or best-effort) penalized EM fit."""

    params: MixtureParams
    loglik: float
    penalized_loglik: float
    penalty_value: float
    iterations: int
    converged: bool
    weights: np.ndarray
    flags: tuple = ()
    objective_trace: tuple = ()


@dataclass(frozen=True)
class RestrictionSpec:
    """Mean intervals and pair-split restriction for one split location h.

    ``mu_intervals`` has one (lo, hi) interval per null component, built from
    midpoints of the null fit's adjacent means; alternative components h and
    h+1 share interval h.  ``tau0`` fixes the within-pair proportion when
    present.  ``null_params`` carries the null fit so restricted fits can be
    started from the exact null embedding.
    """

    h: int
    mu_intervals: tuple
    tau0: float | None = None
    alpha_floor: float = 0.0
    null_params: MixtureParams | None = None

    @property
    def M0(self) -> int:
        return len(self.mu_intervals)

    def component_intervals(self) -> np.ndarray:
        """Bounds array of shape (M0 + 1, 2) for the alternative components."""
        h0 = self.h - 1
        rows = []
        for j in range(self.M0 + 1):
            if j <= h0:
                rows.append(self.mu_intervals[min(j, h0)])
            elif j == h0 + 1:
                rows.append(self.mu_intervals[h0])
            else:
                rows.append(self.mu_intervals[j - 1])
        return np.array(rows, dtype=float)


# ---------------------------------------------------------------------------
# internals on parameter arrays


def _log_weight_matrix(data, alpha, mu, sig, beta, gamma):
    r = residuals(data, mu, beta, gamma)
    ll = (r * r).sum(axis=1)
    ll /= -2.0 * sig[None, :]
    ll -= 0.5 * data.T * (LOG_2PI + np.log(sig))[None, :]
    with np.errstate(divide="ignore"):
        lw = ll + np.log(alpha)[None, :]
    return lw


def _e_step_arrays(data, alpha, mu, sig, beta, gamma):
    lw = _log_weight_matrix(data, alpha, mu, sig, beta, gamma)
    mx = lw.max(axis=1, keepdims=True)
    W = np.exp(lw - mx)
    tot = W.sum(axis=1, keepdims=True)
    W /= tot
    loglik = float(np.sum(np.log(tot) + mx))
    return W, loglik


def _floored_simplex_argmax(w: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """argmax of sum w_g log a_g over the simplex with lower bounds."""
    g = w.shape[0]
    if g == 1:
        return np.ones(1)
    if lower.sum() > 1.0 + 1e-12:
        raise ValueError("infeasible lower bounds on the simplex")
    active = np.zeros(g, dtype=bool)
    a = np.empty(g)
    for _ in range(g + 1):
        free = ~active
        budget = 1.0 - lower[active].sum()
        tw = w[free].sum()
        a[active] = lower[active]
        if tw <= 0:
            a[free] = budget / max(free.sum(), 1)
        else:
            a[free] = budget * w[free] / tw
        viol = free & (a < lower - 1e-15)
        if not viol.any():
            break
        active |= viol
    return a


def _update_alpha(Wsum, n, tau_pair, alpha_floor):
    if tau_pair is None:
        if alpha_floor > 0:
            return _floored_simplex_argmax(Wsum, np.full(Wsum.shape[0], alpha_floor))
        return Wsum / n
    h0, tau0 = tau_pair
    gw = np.concatenate([Wsum[:h0], [Wsum[h0] + Wsum[h0 + 1]], Wsum[h0 + 2:]])
    if alpha_floor > 0:
        lower = np.full(gw.shape[0], alpha_floor)
        lower[h0] = alpha_floor / min(tau0, 1.0 - tau0)
        gvals = _floored_simplex_argmax(gw, lower)
    else:
        gvals = np.ones(1) if gw.shape[0] == 1 else gw / gw.sum()
    alpha = np.empty(Wsum.shape[0])
    alpha[:h0] = gvals[:h0]
    alpha[h0] = tau0 * gvals[h0]
    alpha[h0 + 1] = (1.0 - tau0) * gvals[h0]
    alpha[h0 + 2:] = gvals[h0 + 1:]
    return alpha


def _solve_spd(A, b, flags):
    try:
        sol = np.linalg.solve(A, b)
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    flags.add("ridge")
    jitter = 1e-10 * max(float(np.trace(A)), 1.0)
    return np.linalg.solve(A + jitter * np.eye(A.shape[0]), b)


def _workspace(data):
    """Flattened design blocks reused across M-step calls."""
    n, T, q, p = data.n, data.T, data.q, data.p
    ws = {"Xf": None, "Zf": None}
    if q:
        ws["Xf"] = np.concatenate(
            [np.ones((n * T, 1)), data.x.reshape(n * T, q)], axis=1)
        ws["xf"] = data.x.reshape(n * T, q)
    if p:
        ws["Zf"] = data.z.reshape(n * T, p)
    return ws


def _m_step_arrays(data, W, alpha, mu, sig, beta, gamma, anchors, a_n,
                   tau_pair=None, mu_bounds=None, alpha_floor=0.0, flags=None,
                   work=None):
    flags = flags if flags is not None else set()
    work = work if work is not None else _workspace(data)
    n, T, q, p = data.n, data.T, data.q, data.p
    M = W.shape[1]
    Wsum = W.sum(axis=0)
    alpha_new = _update_alpha(Wsum, n, tau_pair, alpha_floor)

    if p:
        Zf = work["Zf"]
        prec = W / sig[None, :]
        wsum_i = prec.sum(axis=1)
        wtil = np.repeat(wsum_i, T)
        A = Zf.T @ (Zf * wtil[:, None])
        inner = data.y * wsum_i[:, None] - (prec @ mu)[:, None]
        if q:
            inner = inner - (data.x * (prec @ beta)[:, None, :]).sum(axis=2)
        b = Zf.T @ inner.reshape(n * T)
        gamma_new = _solve_spd(A, b, flags)
    else:
        gamma_new = gamma

    yz = data.y - (data.z @ gamma_new if p else 0.0)
    mu_new = mu.copy()
    beta_new = beta.copy()
    if q == 0:
        denom_mb = Wsum * T
        num = W.T @ yz.sum(axis=1)
        for j in range(M):
            if denom_mb[j] < _DEAD_WEIGHT:
                flags.add("dead_component")
                continue
            mu_j = num[j] / denom_mb[j]
            if mu_bounds is not None:
                lo, hi = mu_bounds[j]
                clamped = min(max(mu_j, lo), hi)
                if clamped != mu_j:
                    flags.add("mu_clamped")
                    mu_j = clamped
            mu_new[j] = mu_j
    else:
        Xf, xf = work["Xf"], work["xf"]
        yzf = yz.reshape(n * T)
        for j in range(M):
            if Wsum[j] * T < _DEAD_WEIGHT:
                flags.add("dead_component")
                continue
            wj = np.repeat(W[:, j], T)
            Xw = Xf * wj[:, None]
            sol = _solve_spd(Xf.T @ Xw, Xw.T @ yzf, flags)
            mu_j, beta_j = float(sol[0]), sol[1:]
            if mu_bounds is not None:
                lo, hi = mu_bounds[j]
                clamped = min(max(mu_j, lo), hi)
                if clamped != mu_j:
                    flags.add("mu_clamped")
                    mu_j = float(clamped)
                    xw = xf * wj[:, None]
                    beta_j = _solve_spd(xf.T @ xw, xw.T @ (yzf - mu_j), flags)
            mu_new[j] = mu_j
            beta_new[j] = beta_j

    r = residuals(data, mu_new, beta_new, gamma_new)
    ssr = (W * (r * r).sum(axis=1)).sum(axis=0)
    denom = Wsum * T + 2.0 * a_n
    sig_new = sig.copy()
    good = denom > _DEAD_WEIGHT
    sig_new[good] = (ssr[good] + 2.0 * a_n * anchors[good]) / denom[good]
    return alpha_new, mu_new, sig_new, beta_new, gamma_new


def _run_em(data, init, anchors, a_n, *, max_iter, tol,
            tau_pair=None, mu_bounds=None, alpha_floor=0.0, work=None):
    alpha, mu, sig, beta, gamma = (np.array(v, dtype=float) for v in init)
    work = work if work is not None else _workspace(data)
    flags: set = set()
    W, loglik = _e_step_arrays(data, alpha, mu, sig, beta, gamma)
    obj = loglik + total_penalty_arrays(sig, anchors, a_n)
    trace = [obj]
    converged = False
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        alpha, mu, sig, beta, gamma = _m_step_arrays(
            data, W, alpha, mu, sig, beta, gamma, anchors, a_n,
            tau_pair=tau_pair, mu_bounds=mu_bounds, alpha_floor=alpha_floor,
            flags=flags, work=work)
        W, loglik = _e_step_arrays(data, alpha, mu, sig, beta, gamma)
        new_obj = loglik + total_penalty_arrays(sig, anchors, a_n)
        trace.append(new_obj)
        if abs(new_obj - obj) <= tol * (1.0 + abs(obj)):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    return {
        "arrays": (alpha, mu, sig, beta, gamma),
        "loglik": loglik,
        "penalized": obj,
        "weights": W,
        "iterations": iterations,
        "converged": converged,
        "flags": flags,
        "trace": trace,
    }


_SHORT_PHASE_ITERS = 80


def _best_of_starts(data, inits, anchors, a_n, cfg, *, tau_pair=None,
                    mu_bounds=None, alpha_floor=0.0):
    """Short-then-long multi-start EM.

    All starts run a capped number of iterations; the two leaders continue to
    full tolerance.  Deterministic: ties resolve to the earlier start.
    """
    work = _workspace(data)
    short = min(_SHORT_PHASE_ITERS, cfg.max_iter)
    runs = [
        _run_em(data, init, anchors, a_n, max_iter=short, tol=cfg.tol,
                tau_pair=tau_pair, mu_bounds=mu_bounds, alpha_floor=alpha_floor,
                work=work)
        for init in inits
    ]
    order = sorted(range(len(runs)), key=lambda i: (-runs[i]["penalized"], i))
    best = None
    for i in order[:2]:
        run = runs[i]
        if not run["converged"] and cfg.max_iter > short:
            cont = _run_em(data, run["arrays"], anchors, a_n,
                           max_iter=cfg.max_iter - short, tol=cfg.tol,
                           tau_pair=tau_pair, mu_bounds=mu_bounds,
                           alpha_floor=alpha_floor, work=work)
            cont["iterations"] += run["iterations"]
            cont["flags"] |= run["flags"]
            cont["trace"] = run["trace"][:-1] + cont["trace"]
            run = cont
        if best is None or run["penalized"] > best["penalized"]:
            best = run
    return best


def _result_from_run(run, extra_flags=()) -> FitResult:
    alpha, mu, sig, beta, gamma = run["arrays"]
    params = MixtureParams.from_arrays(alpha, mu, sig, beta, gamma)
    flags = tuple(sorted(set(run["flags"]) | set(extra_flags)))
    return FitResult(
        params=params,
        loglik=run["loglik"],
        penalized_loglik=run["penalized"],
        penalty_value=run["penalized"] - run["loglik"],
        iterations=run["iterations"],
        converged=run["converged"],
        weights=run["weights"],
        flags=flags,
        objective_trace=tuple(run["trace"]),
    )


def _canonicalize_result(res: FitResult) -> FitResult:
    order = canonical_order(res.params)
    if np.all(order == np.arange(res.params.M)):
        return res
    alpha, mu, sig, beta, gamma = res.params.as_arrays()
    params = MixtureParams.from_arrays(alpha[order], mu[order], sig[order], beta[order], gamma)
    return dataclasses.replace(res, params=params, weights=res.weights[:, order])


# ---------------------------------------------------------------------------
# public operations


def e_step(data: PanelDataset, params: MixtureParams) -> np.ndarray:
    """Posterior type probabilities (rows sum to one)."""
    return posterior_weights(data, params)


def m_step(data: PanelDataset, weights: np.ndarray, penalty: PenaltyConfig,
           current: MixtureParams | None = None) -> MixtureParams:
    """One unrestricted M-step given posterior weights.

    ``current`` supplies the pre-update parameters; it is required when the
    data carry common-slope regressors (the gamma update residualizes with
    the pre-update component means), and otherwise optional.
    """
    W = np.asarray(weights, dtype=float)
    if W.ndim != 2 or W.shape[0] != data.n:
        raise ValueError("weights must be (n, M)")
    if not np.allclose(W.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("weight rows must sum to one")
    M = W.shape[1]
    if current is None:
        if data.p:
            raise ValueError("current parameters are required when p > 0")
        alpha = np.full(M, 1.0 / M)
        mu = np.zeros(M)
        sig = np.ones(M)
        beta = np.zeros((M, data.q))
        gamma = np.zeros(0)
    else:
        alpha, mu, sig, beta, gamma = current.as_arrays()
    anchors = penalty.anchors(M)
    out = _m_step_arrays(data, W, alpha, mu, sig, beta, gamma, anchors, penalty.a_n)
    return MixtureParams.from_arrays(*out)


def pooled_ols(data: PanelDataset):
    """Pooled least squares of y on (1, x, z).

    Returns (mu0, beta0, gamma0, sigma0_sq, unit_mean_residuals); the variance
    is the maximum-likelihood SSR / (nT).  This is the single-anchor source
    for plain estimation.
    """
    n, T, q, p = data.n, data.T, data.q, data.p
    cols = [np.ones((n * T, 1))]
    if q:
        cols.append(data.x.reshape(n * T, q))
    if p:
        cols.append(data.z.reshape(n * T, p))
    X = np.hstack(cols)
    yv = data.y.reshape(n * T)
    coef, *_ = np.linalg.lstsq(X, yv, rcond=None)
    resid = yv - X @ coef
    sigma0 = float(resid @ resid / (n * T))
    mu0 = float(coef[0])
    beta0 = coef[1:1 + q]
    gamma0 = coef[1 + q:]
    return mu0, beta0, gamma0, sigma0, resid.reshape(n, T).mean(axis=1)


def _fit_one_component(data: PanelDataset, penalty: PenaltyConfig) -> FitResult:
    mu0, beta0, gamma0, sigma0, _ = pooled_ols(data)
    n, T = data.n, data.T
    anchor = penalty.anchors(1)[0]
    ssr = sigma0 * n * T
    sig = (ssr + 2.0 * penalty.a_n * anchor) / (n * T + 2.0 * penalty.a_n)
    params = MixtureParams.from_arrays([1.0], [mu0], [sig], beta0.reshape(1, -1), gamma0)
    r = residuals(data, np.array([mu0]), beta0.reshape(1, -1), gamma0)[:, :, 0]
    loglik = float(np.sum(-0.5 * (LOG_2PI + np.log(sig) + r * r / sig)))
    pen = total_penalty_arrays(np.array([sig]), np.array([anchor]), penalty.a_n)
    return FitResult(
        params=params, loglik=loglik, penalized_loglik=loglik + pen, penalty_value=pen,
        iterations=1, converged=True, weights=np.ones((n, 1)),
        objective_trace=(loglik + pen,),
    )


def _pmle_starts(data: PanelDataset, M: int, cfg: EMConfig,
                 warm_from: FitResult | None = None):
    mu0, beta0, gamma0, sigma0, umeans = pooled_ols(data)
    starts = []

    order = np.argsort(umeans)
    groups = np.array_split(order, M)
    mu_q = np.empty(M)
    sig_q = np.empty(M)
    alpha_q = np.empty(M)
    for j, g in enumerate(groups):
        vals = umeans[g] if g.size else np.array([0.0])
        mu_q[j] = mu0 + float(vals.mean())
        sig_q[j] = max(float(np.var(vals)) + 0.25 * sigma0, 0.05 * sigma0)
        alpha_q[j] = max(g.size, 1)
    alpha_q /= alpha_q.sum()
    beta_q = np.tile(beta0, (M, 1))
    starts.append((alpha_q, mu_q, sig_q, beta_q, gamma0.copy()))

    if warm_from is not None and warm_from.params.M == M - 1:
        a0, m0, s0, b0, g0 = warm_from.params.as_arrays()
        for c in range(M - 1):
            delta = 0.5 * float(np.sqrt(s0[c]))
            alpha = np.insert(a0, c + 1, a0[c] / 2.0)
            alpha[c] /= 2.0
            mu = np.insert(m0, c + 1, m0[c] + delta)
            mu[c] -= delta
            sig = np.insert(s0, c + 1, s0[c])
            beta = np.insert(b0, c + 1, b0[c], axis=0)
            starts.append((alpha, mu, sig, beta, g0.copy()))

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 17, M)))
    lo, hi = mu0 + umeans.min(), mu0 + umeans.max()
    span = max(hi - lo, np.sqrt(sigma0))
    while len(starts) < max(cfg.n_starts, 1):
        mu_r = rng.uniform(lo - 0.1 * span, hi + 0.1 * span, size=M)
        sig_r = sigma0 * rng.uniform(0.5, 2.0, size=M)
        beta_r = beta0[None, :] + rng.normal(0.0, 0.5, size=(M, data.q)) if data.q \
            else np.zeros((M, 0))
        alpha_r = rng.dirichlet(np.ones(M))
        alpha_r = np.maximum(alpha_r, 0.02)
        alpha_r /= alpha_r.sum()
        starts.append((alpha_r, mu_r, sig_r, beta_r, gamma0.copy()))
    return starts


def fit_pmle(data: PanelDataset, M: int, penalty: PenaltyConfig,
             cfg: EMConfig = EMConfig(), warm_from: FitResult | None = None) -> FitResult:
    """Penalized MLE with ``M`` components, best of several starts.

    ``M = 1`` is closed form (pooled least squares; the penalized variance
    formula reproduces the least-squares variance when anchored at it).
    ``warm_from`` optionally supplies an (M-1)-component fit whose
    split-each-component embeddings are added to the start list.  The output
    is canonicalized.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if M == 1:
        return _fit_one_component(data, penalty)
    anchors = penalty.anchors(M)
    best = _best_of_starts(data, _pmle_starts(data, M, cfg, warm_from),
                           anchors, penalty.a_n, cfg)
    res = _result_from_run(best)
    if not res.converged:
        res = dataclasses.replace(res, flags=tuple(sorted(set(res.flags) | {"not_converged"})))
    return _canonicalize_result(res)


def build_restriction(null_fit: MixtureParams, h: int, epsilon_alpha: float) -> RestrictionSpec:
    """Mean intervals from the null fit's midpoints, for split location h.

    ``tau0`` is left unset; callers fix it per grid point with
    ``dataclasses.replace``.
    """
    M0 = null_fit.M
    if not 1 <= h <= M0:
        raise ValueError(f"h must be in 1..{M0}, got {h}")
    mus = np.array([c.mu for c in null_fit.components])
    if np.any(np.diff(mus) < 0):
        raise ValueError("null fit must be canonical (means ascending)")
    mids = 0.5 * (mus[1:] + mus[:-1])
    edges = np.concatenate([[-np.inf], mids, [np.inf]])
    intervals = tuple((float(edges[j]), float(edges[j + 1])) for j in range(M0))
    return RestrictionSpec(h=h, mu_intervals=intervals, tau0=None,
                           alpha_floor=float(epsilon_alpha), null_params=null_fit)


def _embedding_init(spec: RestrictionSpec, tau_for_pair: float, delta: float):
    null = spec.null_params
    a0, m0, s0, b0, g0 = null.as_arrays()
    h0 = spec.h - 1
    alpha = np.insert(a0, h0 + 1, (1.0 - tau_for_pair) * a0[h0])
    alpha[h0] = tau_for_pair * a0[h0]
    mu = np.insert(m0, h0 + 1, m0[h0] + delta)
    mu[h0] -= delta
    sig = np.insert(s0, h0 + 1, s0[h0])
    beta = np.insert(b0, h0 + 1, b0[h0], axis=0)
    return alpha, mu, sig, beta, g0.copy()


def fit_restricted(data: PanelDataset, M0_plus_1: int, spec: RestrictionSpec,
                   penalty: PenaltyConfig, cfg: EMConfig = EMConfig()) -> FitResult:
    """Restricted penalized fit of the (M0+1)-component alternative.

    Component means are clamped into their intervals after every M-step, the
    within-pair proportion is held at ``spec.tau0`` when present, and all
    proportions are kept on the epsilon-floored simplex when
    ``spec.alpha_floor`` is positive.  Output is not canonicalized (the
    split-pair identity is part of the contract); intervals already order
    non-pair components.
    """
    M0 = spec.M0
    if M0_plus_1 != M0 + 1:
        raise ValueError(f"spec describes {M0} null components; expected M={M0 + 1}")
    if spec.null_params is None:
        raise ValueError("spec must carry the null fit (use build_restriction)")
    bounds = spec.component_intervals()
    widths = bounds[:, 1] - bounds[:, 0]
    if np.any(widths <= 0):
        raise DegenerateRestrictionError(
            "degenerate mean interval (tied null means); reduce the number of components")
    tau0 = spec.tau0
    tau_for_pair = 0.5 if tau0 is None else float(tau0)
    tau_pair = None if tau0 is None else (spec.h - 1, float(tau0))

    s0 = np.array([c.sigma_sq for c in spec.null_params.components])
    sd_h = float(np.sqrt(s0[spec.h - 1]))
    inits = [
        _embedding_init(spec, tau_for_pair, 0.0),
        _embedding_init(spec, tau_for_pair, 0.5 * sd_h),
    ]
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, 23, spec.h, int(round(tau_for_pair * 1000)))))
    mus_null = np.array([c.mu for c in spec.null_params.components])
    span = max(mus_null.max() - mus_null.min(), sd_h)
    n_extra = max(cfg.n_starts - len(inits), 0)
    for _ in range(n_extra):
        alpha, mu, sig, beta, gamma = _embedding_init(spec, tau_for_pair, 0.0)
        mu = mu + rng.normal(0.0, 0.3 * span, size=mu.shape)
        sig = sig * rng.uniform(0.6, 1.6, size=sig.shape)
        inits.append((alpha, mu, sig, beta, gamma))

    anchors = penalty.anchors(M0 + 1)
    floor = float(spec.alpha_floor)
    feasible = []
    for init in inits:
        alpha, mu, sig, beta, gamma = init
        mu = np.clip(mu, bounds[:, 0], bounds[:, 1])
        if floor > 0:
            alpha = _update_alpha(alpha * data.n, data.n, tau_pair, floor) \
                if tau_pair is not None else _floored_simplex_argmax(alpha, np.full(alpha.shape, floor))
        feasible.append((alpha, mu, sig, beta, gamma))
    best = _best_of_starts(data, feasible, anchors, penalty.a_n, cfg,
                           tau_pair=tau_pair, mu_bounds=bounds, alpha_floor=floor)
    if best is None:
        raise ConvergenceError("no feasible start for the restricted fit")
    return _result_from_run(best)


def em_k_steps(data: PanelDataset, start: FitResult, spec: RestrictionSpec,
               K: int, penalty: PenaltyConfig):
    """K generalized-EM rounds from the pair-split restricted fit.

    Each round runs one E-step and one M-step in which the within-pair
    proportion is updated by maximizing W_h log(tau) + W_{h+1} log(1-tau) +
    p_tau(tau) (closed form on each branch), and the interval and proportion
    restrictions of the first stage are no longer imposed.

    Returns (fit, tau_trace) where ``tau_trace`` starts at the initial
    within-pair proportion; the fit's penalty_value excludes p_tau, which the
    caller adds from the final trace entry.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    h0 = spec.h - 1
    alpha, mu, sig, beta, gamma = start.params.as_arrays()
    alpha = alpha.copy()
    anchors = penalty.anchors(spec.M0 + 1)
    pair_mass = alpha[h0] + alpha[h0 + 1]
    tau = float(alpha[h0] / pair_mass) if pair_mass > 0 else 0.5
    tau_trace = [tau]
    flags: set = set(start.flags)
    trace = []
    tiny = 1e-12
    for _ in range(K):
        W, loglik = _e_step_arrays(data, alpha, mu, sig, beta, gamma)
        Wsum = W.sum(axis=0)
        Wh, Wh1 = Wsum[h0], Wsum[h0 + 1]
        denom = Wh + Wh1 + 1.0
        cand = []
        for t in (min((Wh + 1.0) / denom, 0.5), max(Wh / denom, 0.5)):
            t = min(max(t, tiny), 1.0 - tiny)
            with np.errstate(divide="ignore"):
                val = Wh * np.log(t) + Wh1 * np.log(1.0 - t) + p_tau(t)
            cand.append((val, t))
        tau = max(cand, key=lambda c: c[0])[1]
        tau_trace.append(tau)
        alpha, mu, sig, beta, gamma = _m_step_arrays(
            data, W, alpha, mu, sig, beta, gamma, anchors, penalty.a_n,
            tau_pair=(h0, tau), flags=flags)
        W, loglik = _e_step_arrays(data, alpha, mu, sig, beta, gamma)
        trace.append(loglik + total_penalty_arrays(sig, anchors, penalty.a_n) + p_tau(tau))
    run = {
        "arrays": (alpha, mu, sig, beta, gamma),
        "loglik": loglik,
        "penalized": loglik + total_penalty_arrays(sig, anchors, penalty.a_n),
        "weights": W,
        "iterations": K,
        "converged": True,
        "flags": flags,
        "trace": trace,
    }
    return _result_from_run(run), tuple(tau_trace)
