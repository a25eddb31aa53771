"""Component-count test statistics and p-values.

The EM test of an M0-component null against M0 + 1 components:

1. fit the null penalized MLE;
2. for every split location h and every pair proportion tau0 in the grid,
   fit the restricted (M0+1)-component model (means clamped into the null
   fit's midpoint intervals, within-pair proportion held at tau0), then run
   K short generalized-EM rounds that release the restrictions and update the
   pair proportion under its own penalty;
3. the local statistic at h is the best, over tau0, of
   2 * (penalized alternative objective + p_tau - null log likelihood),
   and the global statistic is the max over h;
4. critical values and p-values come from the simulated limiting
   distribution evaluated at the null-fit score matrices.

The penalized LRT replaces step 2 with a free-proportion restricted fit under
a hard floor on every mixing proportion and drops the p_tau term.  Both
statistics are nonnegative by construction because the exact null embedding
(component h duplicated) is always among the starting points.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import asymdist
from .em import (
    EMConfig,
    FitResult,
    _canonicalize_result,
    build_restriction,
    em_k_steps,
    fit_pmle,
    fit_restricted,
    pooled_ols,
)
from .model import ConvergenceError, MixtureParams, PanelDataset, mixture_loglik
from .penalty import PenaltyConfig, compute_an, misclassification, p_tau, pn_sigma
from .scores import information, score_general, score_homogeneity

PRELIM_AN = 0.1  # penalty constant for the preliminary null fit feeding omega


@dataclass(frozen=True)
class TestOutcome:
    """Everything one component-count test produced."""

    M0: int
    statistic: float
    local_stats: np.ndarray
    method: str
    crit: dict
    p_value: float
    p_source: str
    null_fit: FitResult
    best_alt_fit: FitResult | None
    null_dist: asymdist.NullDistribution | None = None
    diagnostics: dict = field(default_factory=dict)


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)).generate_state(1)[0])


def _null_stage(data: PanelDataset, M0: int, cfg: EMConfig,
                penalty: PenaltyConfig | None, warm_from: FitResult | None = None):
    """Null fit plus the calibrated penalty constant.

    The tuning constant needs the null model's misclassification rate, which
    needs a null fit; a preliminary fit with a mid-range constant breaks the
    circle, after which the null is refit at the final constant.  Anchors for
    the null fit are the pooled least-squares variance.
    """
    has_cov = (data.q + data.p) > 0
    _, _, _, sigma0, _ = pooled_ols(data)
    anchor0 = np.array([sigma0])
    diag = {"anchor0": sigma0}
    if penalty is not None:
        a_n, mode, omega = penalty.a_n, "user_fixed", None
    elif M0 == 1:
        a_n = compute_an(1, data.n, data.T, None, has_cov)
        mode = "covariate_constants" if has_cov else "formula"
        omega = None
    else:
        prelim = fit_pmle(data, M0, PenaltyConfig(PRELIM_AN, anchor0), cfg, warm_from=warm_from)
        if has_cov or M0 >= 5:
            omega = None
        else:
            omega = misclassification(prelim.params, data.T, n_draws=10_000,
                                      seed=_derived_seed(cfg.seed, 101, M0))
        a_n = compute_an(M0, data.n, data.T, omega, has_cov)
        mode = "covariate_constants" if has_cov else "formula"
    null_pen = PenaltyConfig(a_n, anchor0, mode)
    null_fit = fit_pmle(data, M0, null_pen, cfg, warm_from=warm_from)
    if not null_fit.converged:
        raise ConvergenceError(f"null fit with M0={M0} did not converge")
    diag.update({"a_n": a_n, "an_mode": mode, "omega": omega})
    return null_fit, null_pen, diag


def _alt_anchor_vector(null_fit: FitResult, h: int) -> np.ndarray:
    """Null-fit variances with component h duplicated (anchors for M0+1)."""
    sig = np.array([c.sigma_sq for c in null_fit.params.components])
    return np.insert(sig, h, sig[h - 1])


def _null_distribution(data: PanelDataset, null_fit: FitResult, M0: int,
                       n_draws: int, seed: int):
    if M0 == 1:
        bundle = score_homogeneity(data, null_fit.params.gamma, null_fit.params.components[0])
    else:
        bundle = score_general(data, null_fit.params)
    info = information(bundle)
    return asymdist.simulate_null(info, M0, n_draws, seed=seed)


def _finish_outcome(data, M0, method, local_stats, best_alt, null_fit,
                    n_draws, cfg, diagnostics, p_source="asymptotic"):
    statistic = float(np.max(local_stats))
    dist = _null_distribution(data, null_fit, M0, n_draws,
                              seed=_derived_seed(cfg.seed, 202, M0))
    crit = dict(dist.levels)
    p = asymdist.p_value(dist, statistic)
    return TestOutcome(
        M0=M0, statistic=statistic, local_stats=np.asarray(local_stats, dtype=float),
        method=method, crit=crit, p_value=p, p_source=p_source,
        null_fit=null_fit, best_alt_fit=best_alt, null_dist=dist,
        diagnostics=diagnostics,
    )


def em_statistic(data: PanelDataset, M0: int, cfg: EMConfig = EMConfig(),
                 penalty: PenaltyConfig | None = None,
                 warm_from: FitResult | None = None):
    """EM test statistic and its ingredients, without the simulated null.

    Returns (local_stats, best_alt_fit, null_fit, diagnostics).
    """
    null_fit, null_pen, diag = _null_stage(data, M0, cfg, penalty, warm_from)
    a_n = null_pen.a_n
    local = np.full(M0, -np.inf)
    dropped = []
    best_alt, best_val = None, -np.inf
    for h in range(1, M0 + 1):
        spec = build_restriction(null_fit.params, h, cfg.epsilon_alpha)
        pen_h = PenaltyConfig(a_n, _alt_anchor_vector(null_fit, h), null_pen.an_mode)
        for tau0 in cfg.tau_set:
            try:
                r1 = fit_restricted(data, M0 + 1, dataclasses.replace(spec, tau0=float(tau0)),
                                    pen_h, cfg)
                rk, tau_trace = em_k_steps(data, r1, spec, cfg.K, pen_h)
                m_val = 2.0 * (rk.penalized_loglik + p_tau(tau_trace[-1]) - null_fit.loglik)
            except Exception as exc:  # noqa: BLE001 - cell failures are dropped, not fatal
                dropped.append((h, float(tau0), f"{type(exc).__name__}: {exc}"))
                warnings.warn(f"EM test cell (h={h}, tau0={tau0}) dropped: {exc}", stacklevel=2)
                continue
            if m_val > local[h - 1]:
                local[h - 1] = m_val
            if m_val > best_val:
                best_val, best_alt = m_val, rk
    if not np.isfinite(local).any():
        raise ConvergenceError("every EM test cell failed")
    diag.update({"tau_set": cfg.tau_set, "K": cfg.K, "dropped_cells": dropped,
                 "epsilon_alpha": cfg.epsilon_alpha})
    if best_alt is not None:
        best_alt = _canonicalize_result(best_alt)
    return local, best_alt, null_fit, diag


def em_test(data: PanelDataset, M0: int, penalty: PenaltyConfig | None = None,
            cfg: EMConfig = EMConfig(), n_draws: int = 2000,
            warm_from: FitResult | None = None) -> TestOutcome:
    """EM test of an M0-component null, asymptotic critical values."""
    if M0 < 1:
        raise ValueError("M0 must be at least 1")
    local, best_alt, null_fit, diag = em_statistic(data, M0, cfg, penalty, warm_from)
    return _finish_outcome(data, M0, "em_test", local, best_alt, null_fit,
                           n_draws, cfg, diag)


def plr_statistic(data: PanelDataset, M0: int, cfg: EMConfig = EMConfig(),
                  penalty: PenaltyConfig | None = None, epsilon: float = 0.1,
                  warm_from: FitResult | None = None):
    """Penalized LRT statistic ingredients (no simulated null).

    The alternative penalty constant is ten times the EM-test constant; the
    proportion floor ``epsilon`` applies to every component of the
    alternative fit.
    """
    null_fit, null_pen, diag = _null_stage(data, M0, cfg, penalty, warm_from)
    a_n_alt = (penalty.a_n if penalty is not None else 10.0 * null_pen.a_n)
    local = np.full(M0, -np.inf)
    dropped = []
    best_alt, best_val = None, -np.inf
    for h in range(1, M0 + 1):
        spec = build_restriction(null_fit.params, h, epsilon)
        spec = dataclasses.replace(spec, tau0=None, alpha_floor=float(epsilon))
        pen_h = PenaltyConfig(a_n_alt, _alt_anchor_vector(null_fit, h), null_pen.an_mode)
        try:
            fit = fit_restricted(data, M0 + 1, spec, pen_h, cfg)
            val = 2.0 * (fit.penalized_loglik - null_fit.loglik)
        except Exception as exc:  # noqa: BLE001
            dropped.append((h, f"{type(exc).__name__}: {exc}"))
            warnings.warn(f"PLRT cell h={h} dropped: {exc}", stacklevel=2)
            continue
        local[h - 1] = val
        if val > best_val:
            best_val, best_alt = val, fit
    if not np.isfinite(local).any():
        raise ConvergenceError("every PLRT cell failed")
    diag.update({"epsilon": epsilon, "a_n_alt": a_n_alt, "dropped_cells": dropped})
    if best_alt is not None:
        best_alt = _canonicalize_result(best_alt)
    return local, best_alt, null_fit, diag


def plrt(data: PanelDataset, M0: int, penalty: PenaltyConfig | None = None,
         cfg: EMConfig = EMConfig(), n_draws: int = 2000, epsilon: float = 0.1,
         warm_from: FitResult | None = None) -> TestOutcome:
    """Penalized likelihood ratio test with simulated asymptotic critical values."""
    if M0 < 1:
        raise ValueError("M0 must be at least 1")
    local, best_alt, null_fit, diag = plr_statistic(data, M0, cfg, penalty, epsilon, warm_from)
    return _finish_outcome(data, M0, "plrt", local, best_alt, null_fit,
                           n_draws, cfg, diag)


def conditional_bootstrap_dataset(data: PanelDataset, params: MixtureParams,
                                  seed: int) -> PanelDataset:
    """Redraw types and noise from ``params`` keeping the observed covariates."""
    alpha, mu, sig, beta, gamma = params.as_arrays()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    types = rng.choice(params.M, size=data.n, p=alpha / alpha.sum())
    eps = rng.standard_normal((data.n, data.T)) * np.sqrt(sig)[types][:, None]
    y = mu[types][:, None] + eps
    if data.q:
        y = y + np.einsum("ntq,nq->nt", data.x, beta[types])
    if data.p:
        y = y + data.z @ gamma
    return PanelDataset(y=y, x=data.x, z=data.z, unit_ids=data.unit_ids)


def bootstrap_test(data: PanelDataset, M0: int, penalty: PenaltyConfig | None = None,
                   cfg: EMConfig = EMConfig(), B: int = 199,
                   method: str = "em") -> TestOutcome:
    """Parametric bootstrap p-value for the EM test or the PLRT.

    Fits the null, simulates B panels from it conditioning on the observed
    covariates, recomputes the statistic on each (including the penalty
    recalibration), and returns p = (1 + #{boot >= observed}) / (B + 1).
    Replications whose pipeline fails are dropped and counted; more than 10%
    drops is an error.
    """
    if B < 99:
        raise ValueError("need at least 99 bootstrap replications")
    stat_fn = em_statistic if method == "em" else plr_statistic
    local, best_alt, null_fit, diag = stat_fn(data, M0, cfg, penalty)
    observed = float(np.max(local))

    boot_stats = []
    failures = 0
    for b in range(B):
        seed_b = _derived_seed(cfg.seed, 303, M0, b)
        bdata = conditional_bootstrap_dataset(data, null_fit.params, seed_b)
        bcfg = dataclasses.replace(cfg, seed=seed_b)
        try:
            blocal, _, _, _ = stat_fn(bdata, M0, bcfg, penalty)
            boot_stats.append(float(np.max(blocal)))
        except Exception as exc:  # noqa: BLE001
            failures += 1
            warnings.warn(f"bootstrap replication {b} dropped: {exc}", stacklevel=2)
    if failures > 0.1 * B:
        raise ConvergenceError(f"{failures} of {B} bootstrap replications failed")
    boot = np.sort(np.asarray(boot_stats))
    n_eff = boot.shape[0]
    p = (1.0 + float(np.sum(boot >= observed))) / (n_eff + 1.0)
    crit = {}
    for sig_level in (0.10, 0.05, 0.01):
        k = min(max(int(np.ceil(n_eff * (1.0 - sig_level))), 1), n_eff)
        crit[sig_level] = float(boot[k - 1])
    diag.update({"B": B, "bootstrap_failures": failures, "method": method})
    return TestOutcome(
        M0=M0, statistic=observed, local_stats=np.asarray(local, dtype=float),
        method=method + "_bootstrap" if not method.endswith("_bootstrap") else method,
        crit=crit, p_value=p, p_source="bootstrap",
        null_fit=null_fit, best_alt_fit=best_alt, null_dist=None, diagnostics=diag,
    )


def demonstrate_unboundedness(data: PanelDataset) -> dict:
    """Evaluate the degenerate two-component parameter that blows up the LRT.

    Sets one component's mean and variance to the sample mean and (smallest)
    within-unit variance of a single unit, with mixing weight 1/n, and
    returns the unpenalized likelihood ratio against the one-component MLE
    together with its penalized counterpart at the same point.
    """
    if data.T < 2:
        raise ValueError("need T >= 2 for within-unit variances")
    if data.q or data.p:
        raise ValueError("the demonstration is for the no-covariate model")
    ybar = data.y.mean(axis=1)
    s2 = ((data.y - ybar[:, None]) ** 2).mean(axis=1)
    i_star = int(np.argmin(s2))
    mu0 = float(data.y.mean())
    sig0 = float(((data.y - mu0) ** 2).mean())
    n, T = data.n, data.T
    loglik0 = float(np.sum(-0.5 * (np.log(2 * np.pi) + np.log(sig0)
                                   + (data.y - mu0) ** 2 / sig0)))
    s2_star = float(s2[i_star])
    if s2_star <= 0:
        return {"lr_degenerate": np.inf, "lr_penalized": -np.inf,
                "unit": i_star, "s2_star": 0.0, "sigma0_sq": sig0}
    params = MixtureParams.from_arrays(
        [1.0 / n, 1.0 - 1.0 / n],
        [float(ybar[i_star]), mu0],
        [s2_star, sig0],
        np.zeros((2, 0)), np.zeros(0))
    lr = 2.0 * (mixture_loglik(data, params) - loglik0)
    a_n = compute_an(1, n, T, None, False)
    pen = pn_sigma(s2_star, sig0, a_n) + pn_sigma(sig0, sig0, a_n)
    return {
        "lr_degenerate": float(lr),
        "lr_penalized": float(lr + 2.0 * pen),
        "unit": i_star,
        "s2_star": s2_star,
        "sigma0_sq": sig0,
        "a_n": a_n,
    }
