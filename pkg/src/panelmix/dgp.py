"""Simulation of panel mixture datasets and batch experiment running.

Every draw flows from one user-visible seed through ``numpy`` seed sequences;
replication r of cell c uses ``SeedSequence((seed, c, r))``, so results are
identical for any execution order or worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import MixtureParams, PanelDataset


@dataclass(frozen=True)
class DGPSpec:
    """One simulated design: parameters, panel shape, covariate law, seed.

    ``covariate_law`` is either the name of a built-in law (``"standard_normal"``,
    ``"uniform"``) applied iid over units, periods and columns, or a callable
    ``law(rng, shape) -> ndarray``.
    """

    params: MixtureParams
    n: int
    T: int
    covariate_law: object = "standard_normal"
    seed: int = 0


def _draw_covariates(law, rng: np.random.Generator, shape) -> np.ndarray:
    if callable(law):
        out = np.asarray(law(rng, shape), dtype=float)
        if out.shape != shape:
            raise ValueError(f"covariate law returned shape {out.shape}, expected {shape}")
        return out
    if law == "standard_normal":
        return rng.standard_normal(shape)
    if law == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    raise ValueError(f"unknown covariate law {law!r}")


def generate_with_types(spec: DGPSpec):
    """Simulate a dataset and return it together with the latent types."""
    alpha, mu, sig, beta, gamma = spec.params.as_arrays()
    n, T, q, p = spec.n, spec.T, spec.params.q, spec.params.p
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    types = rng.choice(spec.params.M, size=n, p=alpha / alpha.sum())
    x = _draw_covariates(spec.covariate_law, rng, (n, T, q))
    z = _draw_covariates(spec.covariate_law, rng, (n, T, p))
    eps = rng.standard_normal((n, T)) * np.sqrt(sig)[types][:, None]
    y = mu[types][:, None] + eps
    if q:
        y = y + np.einsum("ntq,nq->nt", x, beta[types])
    if p:
        y = y + z @ gamma
    return PanelDataset(y=y, x=x, z=z), types


def generate(spec: DGPSpec) -> PanelDataset:
    """Simulate a balanced panel from the mixture model (types marginalized)."""
    data, _ = generate_with_types(spec)
    return data


def rep_seed_sequence(seed: int, cell: int, rep: int) -> np.random.SeedSequence:
    """Seed sequence for replication ``rep`` of grid cell ``cell``."""
    return np.random.SeedSequence((int(seed), int(cell), int(rep)))


def derived_seed(seed: int, cell: int, rep: int) -> int:
    """Single integer seed derived from (seed, cell, rep), echoed in reports."""
    return int(rep_seed_sequence(seed, cell, rep).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentCell:
    """One grid cell: a DGP plus the task to run on each replication.

    ``task`` keys:
      kind: "test" | "select" | "ic"
      method: "em" | "plrt"           (test, select)
      M0: null component count        (test)
      Mbar: selection upper bound     (select, ic)
      level: significance level       (select; tests always record 10/5/1%)
      n_draws: null-distribution draws
      bootstrap: replication count B, or absent for asymptotic p-values
      em: optional dict of EMConfig overrides (n_starts, K, tau_set, ...)
    """

    name: str
    dgp: DGPSpec
    task: dict = field(default_factory=dict)


def _run_one_rep(args):
    cell, cell_index, rep, base_seed = args
    # Deferred imports keep this module importable from penalty without cycles.
    from .em import EMConfig
    from .sht import information_criteria, select_sht
    from .testing import bootstrap_test, em_test, plrt

    seed = derived_seed(base_seed, cell_index, rep)
    spec = DGPSpec(params=cell.dgp.params, n=cell.dgp.n, T=cell.dgp.T,
                   covariate_law=cell.dgp.covariate_law, seed=seed)
    data = generate(spec)
    task = dict(cell.task)
    kind = task.get("kind", "test")
    em_overrides = dict(task.get("em", {}))
    em_overrides.setdefault("seed", seed + 1)
    cfg = EMConfig(**em_overrides)
    n_draws = int(task.get("n_draws", 2000))

    try:
        if kind == "test":
            method = task.get("method", "em")
            run = em_test if method == "em" else plrt
            if task.get("bootstrap"):
                out = bootstrap_test(data, int(task["M0"]), cfg=cfg,
                                     B=int(task["bootstrap"]), method=method)
                rejects = {lv: out.p_value <= lv for lv in (0.10, 0.05, 0.01)}
            else:
                out = run(data, int(task["M0"]), cfg=cfg, n_draws=n_draws)
                rejects = {lv: out.statistic >= out.crit[lv] for lv in (0.10, 0.05, 0.01)}
            return {"ok": True, "kind": kind, "statistic": out.statistic,
                    "p_value": out.p_value, "rejects": rejects, "seed": seed}
        if kind == "select":
            sel = select_sht(data, Mbar=int(task.get("Mbar", 5)),
                             level=float(task.get("level", 0.05)),
                             method=task.get("method", "em"), cfg=cfg,
                             n_draws=n_draws)
            return {"ok": True, "kind": kind, "M_hat": sel.M_hat,
                    "censored": sel.censored, "seed": seed}
        if kind == "ic":
            aic_res, bic_res = information_criteria(data, Mbar=int(task.get("Mbar", 5)), cfg=cfg)
            return {"ok": True, "kind": kind, "M_aic": aic_res.M_hat,
                    "M_bic": bic_res.M_hat, "seed": seed}
        raise ValueError(f"unknown task kind {kind!r}")
    except Exception as exc:  # noqa: BLE001 - per-replication failures are counted, not fatal
        return {"ok": False, "kind": kind, "error": f"{type(exc).__name__}: {exc}", "seed": seed}


def run_experiment(cells, reps: int, seed: int = 0, threads: int = 1):
    """Run ``reps`` replications of each cell and aggregate.

    Returns a list (one entry per cell) of dicts carrying exact counts, so
    every reported rate is an integer ratio over ``reps``.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    jobs = [(cell, ci, r, seed) for ci, cell in enumerate(cells) for r in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one_rep, jobs, chunksize=1))
    else:
        results = [_run_one_rep(j) for j in jobs]

    summaries = []
    for ci, cell in enumerate(cells):
        rows = results[ci * reps:(ci + 1) * reps]
        ok = [r for r in rows if r["ok"]]
        failures = [r for r in rows if not r["ok"]]
        summary = {
            "cell": cell.name,
            "reps": reps,
            "completed": len(ok),
            "failures": len(failures),
            "failure_messages": [r["error"] for r in failures[:5]],
        }
        kind = cell.task.get("kind", "test")
        if kind == "test":
            for lv in (0.10, 0.05, 0.01):
                k = sum(r["rejects"][lv] for r in ok)
                m = max(len(ok), 1)
                summary[f"reject_{lv:.2f}"] = k
                summary[f"rate_{lv:.2f}"] = k / m
                summary[f"se_{lv:.2f}"] = math.sqrt(max(k / m * (1 - k / m), 0.0) / m)
        elif kind == "select":
            freq = {}
            for r in ok:
                freq[r["M_hat"]] = freq.get(r["M_hat"], 0) + 1
            summary["selection_counts"] = dict(sorted(freq.items()))
            summary["censored"] = sum(r["censored"] for r in ok)
        elif kind == "ic":
            for key in ("M_aic", "M_bic"):
                freq = {}
                for r in ok:
                    freq[r[key]] = freq.get(r[key], 0) + 1
                summary[f"{key}_counts"] = dict(sorted(freq.items()))
        summaries.append(summary)
    return summaries
