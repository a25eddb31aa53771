"""Sequential hypothesis testing for the number of components, plus AIC/BIC.

The sequential estimator tests M0 = 1, 2, ... against M0 + 1 and stops at the
first non-rejection (statistic below the simulated critical value at the run
level).  Null fits are chained upward as warm starts, mirroring how the tests
are used in practice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import asymdist
from .em import EMConfig, FitResult, fit_pmle
from .model import PanelDataset
from .penalty import PenaltyConfig
from .testing import _null_stage, em_test, plrt


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a component-count selection procedure."""

    M_hat: int
    per_M: tuple
    method: str
    level_schedule: str
    censored: bool = False


def _level_at(level, n: int) -> float:
    """Fixed level, or the shrinking schedule min(0.05, c / log n)."""
    if isinstance(level, tuple) and len(level) == 2 and level[0] == "shrinking":
        return min(0.05, float(level[1]) / math.log(max(n, 3)))
    return float(level)


def select_sht(data: PanelDataset, Mbar: int, level=0.05, method: str = "em",
               penalty: PenaltyConfig | None = None, cfg: EMConfig = EMConfig(),
               n_draws: int = 2000) -> SelectionResult:
    """Smallest M0 whose null is not rejected against M0 + 1.

    ``level`` is either a float (fixed, the default 0.05) or
    ``("shrinking", c)`` for the schedule min(0.05, c / log n).  When every
    M0 up to ``Mbar`` is rejected the estimate is censored at ``Mbar`` and
    flagged.
    """
    if Mbar < 1:
        raise ValueError("Mbar must be at least 1")
    run = em_test if method == "em" else plrt
    lvl = _level_at(level, data.n)
    rows = []
    warm: FitResult | None = None
    M_hat, censored = Mbar, True
    for M0 in range(1, Mbar + 1):
        out = run(data, M0, penalty=penalty, cfg=cfg, n_draws=n_draws, warm_from=warm)
        crit = asymdist.critical_value(out.null_dist, 1.0 - lvl)
        reject = out.statistic >= crit
        rows.append({
            "M": M0, "statistic": out.statistic, "critical_value": crit,
            "level": lvl, "p_value": out.p_value,
            "decision": "reject" if reject else "fail_to_reject",
        })
        warm = out.null_fit
        if not reject:
            M_hat, censored = M0, False
            break
    schedule = f"fixed {lvl:g}" if not isinstance(level, tuple) \
        else f"min(0.05, {level[1]:g}/log n) = {lvl:g}"
    return SelectionResult(M_hat=M_hat, per_M=tuple(rows), method=f"sht_{method}",
                           level_schedule=schedule, censored=censored)


def information_criteria(data: PanelDataset, Mbar: int,
                         penalty: PenaltyConfig | None = None,
                         cfg: EMConfig = EMConfig()):
    """AIC and BIC over M = 1..Mbar on one shared sequence of penalized fits.

    The criteria use the unpenalized log likelihood at each penalized MLE and
    the parameter count k = (M - 1) + M (q + 2) + p; BIC's sample size is the
    number of units.  Returns (aic_result, bic_result); ties select the
    smaller model.
    """
    if Mbar < 1:
        raise ValueError("Mbar must be at least 1")
    n, q, p = data.n, data.q, data.p
    rows = []
    warm: FitResult | None = None
    skipped = []
    for M in range(1, Mbar + 1):
        try:
            if penalty is not None:
                fit = fit_pmle(data, M, penalty, cfg, warm_from=warm)
            else:
                fit, _, _ = _null_stage(data, M, cfg, None, warm_from=warm)
        except Exception as exc:  # noqa: BLE001 - a non-convergent M is skipped with warning
            skipped.append((M, f"{type(exc).__name__}: {exc}"))
            continue
        k = (M - 1) + M * (q + 2) + p
        ll = fit.loglik
        rows.append({"M": M, "k": k, "loglik": ll,
                     "aic": -2.0 * ll + 2.0 * k,
                     "bic": -2.0 * ll + k * math.log(n)})
        warm = fit
    if not rows:
        raise RuntimeError("no component count could be fitted")
    aic_vals = np.array([r["aic"] for r in rows])
    bic_vals = np.array([r["bic"] for r in rows])
    aic_M = rows[int(np.argmin(aic_vals))]["M"]
    bic_M = rows[int(np.argmin(bic_vals))]["M"]

    def _rows(kind: str, chosen: int):
        out = []
        for r in rows:
            out.append({"M": r["M"], "k": r["k"], "loglik": r["loglik"],
                        "value": r[kind],
                        "decision": "selected" if r["M"] == chosen else ""})
        return tuple(out)

    aic_res = SelectionResult(M_hat=aic_M, per_M=_rows("aic", aic_M), method="aic",
                              level_schedule="not applicable")
    bic_res = SelectionResult(M_hat=bic_M, per_M=_rows("bic", bic_M), method="bic",
                              level_schedule="not applicable")
    return aic_res, bic_res
