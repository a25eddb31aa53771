"""Command-line interface: data ingestion and subcommands over the library.

Input is long-format delimited text with a header; required columns are the
unit id, the period, and the outcome, plus any x (component-specific slope)
and z (common slope) regressor columns.  Reports are JSON (default), a plain
table, or CSV; all randomness flows from --seed and reports echo the derived
seeds, so rerunning a report's echoed configuration reproduces it exactly.

Exit codes: 0 ok, 2 bad input, 3 non-convergence, 4 internal numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np
import pandas as pd

from . import asymdist
from .dgp import DGPSpec, ExperimentCell, run_experiment
from .em import EMConfig, fit_pmle
from .model import ConvergenceError, MixtureParams, PanelDataset
from .penalty import AN_COVARIATE_CONSTANTS, AN_RHO_TABLE, PenaltyConfig
from .scores import information, score_general, score_homogeneity
from .sht import information_criteria, select_sht
from .testing import _null_stage, bootstrap_test, demonstrate_unboundedness, em_test, plrt

SCHEMA_VERSION = 1

EXIT_BAD_INPUT = 2
EXIT_NO_CONVERGENCE = 3
EXIT_NUMERIC = 4


class InputDataError(ValueError):
    """The input file violates the panel layout contract."""


def ingest(path: str, unit_col: str = "unit", period_col: str = "period",
           y_col: str = "y", x_cols=(), z_cols=(), delimiter: str = ",") -> PanelDataset:
    """Read a long-format delimited file into a balanced panel.

    Validates balance (every unit carries the same period set), uniqueness of
    (unit, period), and numeric fields; rows are sorted by (unit, period) so
    shuffled input yields the identical dataset.
    """
    try:
        df = pd.read_csv(path, delimiter=delimiter)
    except Exception as exc:
        raise InputDataError(f"cannot read {path}: {exc}") from exc
    needed = [unit_col, period_col, y_col, *x_cols, *z_cols]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise InputDataError(f"missing columns: {', '.join(missing)}")

    for col in [y_col, *x_cols, *z_cols]:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals)
        if bad.any():
            row = int(df.index[bad][0])
            raise InputDataError(f"non-numeric or missing value at row {row + 2}, column {col!r}")
        df[col] = vals.astype(float)

    dups = df.duplicated(subset=[unit_col, period_col])
    if dups.any():
        u, t = df.loc[df.index[dups][0], [unit_col, period_col]]
        raise InputDataError(f"duplicate (unit, period) pair: ({u}, {t})")

    df = df.sort_values([unit_col, period_col], kind="mergesort")
    period_sets = df.groupby(unit_col)[period_col].apply(tuple)
    reference = period_sets.iloc[0]
    offenders = [str(u) for u, ps in period_sets.items() if ps != reference]
    if offenders:
        raise InputDataError(
            "unbalanced panel; offending units: " + ", ".join(offenders[:10])
            + ("..." if len(offenders) > 10 else ""))

    units = period_sets.index.tolist()
    n, T = len(units), len(reference)
    y = df[y_col].to_numpy().reshape(n, T)
    x = df[list(x_cols)].to_numpy().reshape(n, T, len(x_cols)) if x_cols \
        else np.zeros((n, T, 0))
    z = df[list(z_cols)].to_numpy().reshape(n, T, len(z_cols)) if z_cols \
        else np.zeros((n, T, 0))
    return PanelDataset(y=y, x=x, z=z, unit_ids=tuple(units))


def _stars(p: float) -> str:
    if p <= 0.01:
        return "***"
    if p <= 0.05:
        return "**"
    if p <= 0.10:
        return "*"
    return ""


def _params_payload(params: MixtureParams) -> dict:
    alpha, mu, sig, beta, gamma = params.as_arrays()
    return {
        "alpha": alpha.tolist(),
        "mu": mu.tolist(),
        "sigma_sq": sig.tolist(),
        "beta": beta.tolist(),
        "gamma": gamma.tolist(),
    }


def _fit_payload(fit) -> dict:
    return {
        "params": _params_payload(fit.params),
        "loglik": fit.loglik,
        "penalized_loglik": fit.penalized_loglik,
        "penalty_value": fit.penalty_value,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "flags": list(fit.flags),
    }


def _test_payload(out) -> dict:
    return {
        "M0": out.M0,
        "method": out.method,
        "statistic": out.statistic,
        "local_stats": out.local_stats.tolist(),
        "critical_values": {f"{lv:.2f}": cv for lv, cv in sorted(out.crit.items())},
        "p_value": out.p_value,
        "p_source": out.p_source,
        "stars": _stars(out.p_value),
        "a_n": out.diagnostics.get("a_n"),
        "a_n_mode": out.diagnostics.get("an_mode"),
        "omega": out.diagnostics.get("omega"),
        "dropped_cells": out.diagnostics.get("dropped_cells", []),
        "null_fit": _fit_payload(out.null_fit),
        "alt_fit": _fit_payload(out.best_alt_fit) if out.best_alt_fit else None,
    }


def _emit(report: dict, fmt: str, out_path: str | None) -> None:
    if fmt == "json":
        text = json.dumps(report, indent=2, sort_keys=True, allow_nan=True)
    elif fmt == "csv":
        flat = pd.json_normalize(report, sep=".")
        text = flat.to_csv(index=False)
    else:
        lines = []

        def walk(prefix, obj):
            if isinstance(obj, dict):
                for k, v in obj.items():
                    walk(f"{prefix}{k}." if prefix else f"{k}.", v) if isinstance(v, (dict, list)) \
                        else lines.append(f"{prefix}{k}: {v}")
            elif isinstance(obj, list):
                lines.append(f"{prefix[:-1]}: {obj}")

        walk("", report)
        text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _common_config(args) -> EMConfig:
    kw = {"seed": args.seed}
    if args.epsilon is not None:
        kw["epsilon_alpha"] = args.epsilon
    if getattr(args, "n_starts", None):
        kw["n_starts"] = args.n_starts
    return EMConfig(**kw)


def _penalty_override(args):
    if args.an is None:
        return None
    return PenaltyConfig(args.an, [1.0], "user_fixed")


def _cmd_fit(args) -> dict:
    data = _load(args)
    cfg = _common_config(args)
    if args.an is not None:
        from .em import pooled_ols
        _, _, _, sigma0, _ = pooled_ols(data)
        fit = fit_pmle(data, args.m, PenaltyConfig(args.an, [sigma0]), cfg)
        a_n, mode = args.an, "user_fixed"
    else:
        fit, pen, diag = _null_stage(data, args.m, cfg, None)
        a_n, mode = diag["a_n"], diag["an_mode"]
    return {"fit": _fit_payload(fit), "a_n": a_n, "a_n_mode": mode}


def _cmd_test(args) -> dict:
    data = _load(args)
    cfg = _common_config(args)
    penalty = _penalty_override(args)
    if args.bootstrap:
        out = bootstrap_test(data, args.m0, penalty=penalty, cfg=cfg,
                             B=args.bootstrap, method=args.method)
    elif args.method == "em":
        out = em_test(data, args.m0, penalty=penalty, cfg=cfg, n_draws=args.draws)
    else:
        out = plrt(data, args.m0, penalty=penalty, cfg=cfg, n_draws=args.draws)
    return {"test": _test_payload(out)}


def _cmd_select(args) -> dict:
    data = _load(args)
    cfg = _common_config(args)
    sel = select_sht(data, Mbar=args.mbar, level=args.level, method=args.method,
                     penalty=_penalty_override(args), cfg=cfg, n_draws=args.draws)
    aic_res, bic_res = information_criteria(data, Mbar=args.mbar,
                                            penalty=_penalty_override(args), cfg=cfg)
    return {
        "selection": {
            "M_hat": sel.M_hat, "method": sel.method, "censored": sel.censored,
            "level_schedule": sel.level_schedule, "per_M": list(sel.per_M),
        },
        "aic": {"M_hat": aic_res.M_hat, "per_M": list(aic_res.per_M)},
        "bic": {"M_hat": bic_res.M_hat, "per_M": list(bic_res.per_M)},
    }


def _cmd_crit(args) -> dict:
    report = {}
    if args.show_an_table:
        report["an_coefficients"] = {
            str(m): {"intercept": r[0], "inv_T": r[1], "inv_n": r[2],
                     "logit_an": r[3], "logit_omega": r[4]}
            for m, r in AN_RHO_TABLE.items()}
        report["an_covariate_constants"] = {str(m): v for m, v in AN_COVARIATE_CONSTANTS.items()}
        if not args.input:
            return report
    data = _load(args)
    cfg = _common_config(args)
    null_fit, _, diag = _null_stage(data, args.m0, cfg, _penalty_override(args))
    if args.m0 == 1:
        bundle = score_homogeneity(data, null_fit.params.gamma, null_fit.params.components[0])
    else:
        bundle = score_general(data, null_fit.params)
    dist = asymdist.simulate_null(information(bundle), args.m0, args.draws, seed=args.seed + 1)
    report.update({
        "M0": args.m0, "a_n": diag["a_n"], "omega": diag["omega"],
        "critical_values": {f"{lv:.2f}": cv for lv, cv in sorted(dist.levels.items())},
        "n_draws": args.draws,
        "diagnostics": dist.diagnostics,
    })
    if args.dump_samples:
        dist.to_csv(args.dump_samples)
        report["samples_path"] = args.dump_samples
    return report


def _cmd_dump_scores(args) -> dict:
    data = _load(args)
    cfg = _common_config(args)
    null_fit, _, _ = _null_stage(data, args.m0, cfg, _penalty_override(args))
    if args.m0 == 1:
        bundle = score_homogeneity(data, null_fit.params.gamma, null_fit.params.components[0])
    else:
        bundle = score_general(data, null_fit.params)
    info = information(bundle)
    prefix = args.output or "scores"
    np.savetxt(f"{prefix}.eta.csv", bundle.s_eta, delimiter=",",
               header=",".join(bundle.eta_labels), comments="")
    np.savetxt(f"{prefix}.lambda.csv", bundle.s_lambda, delimiter=",",
               header=",".join(bundle.lambda_labels), comments="")
    np.savetxt(f"{prefix}.info_full.csv", info.I_full, delimiter=",")
    np.savetxt(f"{prefix}.info_schur.csv", info.I_schur, delimiter=",")
    return {"written": [f"{prefix}.eta.csv", f"{prefix}.lambda.csv",
                        f"{prefix}.info_full.csv", f"{prefix}.info_schur.csv"],
            "d_eta": bundle.d_eta, "d_lam": bundle.d_lam, "M0": bundle.M0}


def _cmd_simulate(args) -> dict:
    with open(args.config) as fh:
        design = json.load(fh)
    cells = []
    for c in design["cells"]:
        params = MixtureParams.from_arrays(
            c["alpha"], c["mu"], c["sigma_sq"],
            np.asarray(c.get("beta", [[] for _ in c["alpha"]])),
            np.asarray(c.get("gamma", [])))
        cells.append(ExperimentCell(
            name=c["name"],
            dgp=DGPSpec(params=params, n=int(c["n"]), T=int(c["T"]),
                        covariate_law=c.get("covariate_law", "standard_normal")),
            task=c.get("task", {"kind": "test", "method": "em", "M0": params.M})))
    summaries = run_experiment(cells, reps=int(design.get("reps", 100)),
                               seed=args.seed, threads=args.threads)
    return {"experiment": summaries}


def _cmd_unbounded(args) -> dict:
    data = _load(args)
    return {"unboundedness": demonstrate_unboundedness(data)}


def _load(args) -> PanelDataset:
    x_cols = args.x.split(",") if args.x else []
    z_cols = args.z.split(",") if args.z else []
    return ingest(args.input, unit_col=args.unit, period_col=args.period,
                  y_col=args.y, x_cols=x_cols, z_cols=z_cols, delimiter=args.delimiter)


def _add_io_args(p, need_input=True):
    p.add_argument("--input", required=need_input, help="long-format delimited data file")
    p.add_argument("--unit", default="unit", help="unit id column")
    p.add_argument("--period", default="period", help="period column")
    p.add_argument("--y", default="y", help="outcome column")
    p.add_argument("--x", default="", help="comma-separated component-slope regressor columns")
    p.add_argument("--z", default="", help="comma-separated common-slope regressor columns")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--an", type=float, default=None, help="override the penalty constant")
    p.add_argument("--epsilon", type=float, default=None, help="proportion floor")
    p.add_argument("--n-starts", dest="n_starts", type=int, default=None)
    p.add_argument("--format", choices=("json", "table", "csv"), default="json")
    p.add_argument("--output", default=None, help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panelmix",
                                 description="Mixture panel regression estimation and tests")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="penalized EM fit with a fixed component count")
    _add_io_args(p)
    p.add_argument("--m", type=int, required=True, help="component count")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("test", help="test M0 components against M0+1")
    _add_io_args(p)
    p.add_argument("--m0", type=int, required=True)
    p.add_argument("--method", choices=("em", "plrt"), default="em")
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap replications (0 = asymptotic)")
    p.set_defaults(func=_cmd_test)

    p = sub.add_parser("select", help="sequential testing plus AIC/BIC")
    _add_io_args(p)
    p.add_argument("--mbar", type=int, required=True)
    p.add_argument("--method", choices=("em", "plrt"), default="em")
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--draws", type=int, default=2000)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("crit", help="simulated critical values at a null fit")
    _add_io_args(p, need_input=False)
    p.add_argument("--m0", type=int, default=1)
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--dump-samples", default=None, help="CSV path for the raw draws")
    p.add_argument("--show-an-table", action="store_true",
                   help="print the embedded penalty calibration constants")
    p.set_defaults(func=_cmd_crit)

    p = sub.add_parser("dump-scores", help="write score and information matrices for audit")
    _add_io_args(p)
    p.add_argument("--m0", type=int, required=True)
    p.set_defaults(func=_cmd_dump_scores)

    p = sub.add_parser("simulate", help="run an experiment grid from a JSON design")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--format", choices=("json", "table", "csv"), default="json")
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("unbounded", help="evaluate the degenerate-parameter likelihood ratio")
    _add_io_args(p)
    p.set_defaults(func=_cmd_unbounded)

    return ap


def run(args) -> dict:
    """Dispatch one parsed command; returns the report dict."""
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items())
                   if k != "func" and not callable(v)},
    }
    report.update(args.func(args))
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = run(args)
    except InputDataError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (np.linalg.LinAlgError, FloatingPointError, asymdist.NonPSDError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit(report, args.format, args.output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
