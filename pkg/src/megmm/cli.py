"""Command-line front end: ``fit`` on CSV data, ``simulate`` from a JSON config, ``analytic`` curves.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from ._solver import ConvergenceError
from .estimate import EstimationError, WeightSpec, build_weight, solve_gmm
from .model import DataSet, LinearIV
from .montecarlo import ConfigError, SimConfig, analytic_example, run_mc
from .resample import dr_bootstrap, hh_bootstrap, index_matrix, me_bootstrap, percentile_ci, split_sample

log = logging.getLogger("megmm")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
FIT_ESTIMATORS = ("GMM", "ME-boot", "RSS-ME", "DR", "HH")
NA_TOKENS = {"", "na", "nan", "n/a", "null", "."}


class InputError(ValueError):
    pass


def fmt(x) -> str:
    """Six significant digits for anything printed."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.6g}"


def _round6(x):
    if isinstance(x, dict):
        return {k: _round6(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_round6(v) for v in x]
    if isinstance(x, float):
        return None if not math.isfinite(x) else float(f"{x:.6g}")
    return x


# --------------------------------------------------------------------------- CSV ingestion


def read_columns(path, names) -> tuple[dict, int]:
    """Numeric columns ``names`` from a headed CSV; rows with any NA among them are dropped."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        missing = [c for c in names if c not in header]
        if missing:
            raise InputError(f"{path}: unknown column(s) {missing}")
        pos = [header.index(c) for c in names]
        rows, dropped = [], 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            cells = [rec[i].strip() for i in pos]
            if any(c.lower() in NA_TOKENS for c in cells):
                dropped += 1
                continue
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric value in {cells}") from None
    arr = np.array(rows, dtype=float).reshape(-1, len(names))
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{path}: non-finite values")
    return {c: arr[:, j] for j, c in enumerate(names)}, dropped


def write_columns(path, cols: dict) -> None:
    names = list(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(cols[c] for c in names)):
            w.writerow([repr(float(v)) for v in row])


def _names(text) -> list:
    if not text:
        return []
    return [t.strip() for t in text.split(",") if t.strip()]


def build_iv_data(cols, outcome, endog, iv, controls, constant=False):
    """Controls enter both regressors and instruments."""
    n = len(cols[outcome])
    ctrl = [cols[c] for c in controls]
    if constant:
        ctrl.append(np.ones(n))
    X = np.column_stack([cols[c] for c in endog] + ctrl)
    Z = np.column_stack([cols[c] for c in iv] + ctrl)
    return cols[outcome], X, Z


# --------------------------------------------------------------------------- diagnostics


def _ols(y, X):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef, y - X @ coef


def first_stage_f(x, Z, n_excluded: int) -> float:
    """Classical F for the excluded instruments (the first ``n_excluded`` columns of Z)."""
    n, k = Z.shape
    _, e_u = _ols(x, Z)
    rest = Z[:, n_excluded:]
    e_r = x - x.mean() if rest.shape[1] == 0 else _ols(x, rest)[1]
    rss_u, rss_r = float(e_u @ e_u), float(e_r @ e_r)
    return ((rss_r - rss_u) / n_excluded) / (rss_u / (n - k))


def robust_wald_f(y, X, test_cols):
    """HC0 Wald statistic / q for coefficients ``test_cols``; returns (F, p) with F(q, n - k)."""
    n, k = X.shape
    XtX_inv = np.linalg.pinv(X.T @ X)
    coef = XtX_inv @ X.T @ y
    e = y - X @ coef
    meat = (X * e[:, None] ** 2).T @ X
    V = XtX_inv @ meat @ XtX_inv
    b = coef[test_cols]
    Vb = V[np.ix_(test_cols, test_cols)]
    q = len(test_cols)
    F = float(b @ np.linalg.pinv(Vb) @ b) / q
    return F, float(stats.f.sf(F, q, n - k))


def reset_test(y, x_endog, Z, powers=(2, 3, 4)):
    """Outcome on instruments, controls and powers of the first-stage fit; robust F on the powers."""
    coef, _ = _ols(x_endog, Z)
    xhat = Z @ coef
    s = xhat.std()
    u = (xhat - xhat.mean()) / (s if s > 0 else 1.0)
    aug = np.column_stack([Z] + [u**k for k in powers])
    return robust_wald_f(y, aug, list(range(Z.shape[1], aug.shape[1])))


# --------------------------------------------------------------------------- fit


def fit_report(y, X, Z, *, endog_names, n_excluded, weights, estimators, B, S, alpha, seed, dropped=0):
    n, p = X.shape
    m = Z.shape[1]
    model = LinearIV(m, p)
    data = model.dataset(y, X, Z)
    panels = {}
    idx = index_matrix(n, B, seed) if any(e in estimators for e in ("ME-boot", "DR", "HH")) else None
    for wtext, spec in weights:
        W, _ = build_weight(spec, model, data)
        fit = solve_gmm(model, data, W)
        se_c, se_r, se_me = fit.se("conventional"), fit.se("robust"), fit.se("me")
        stats_ = {name: {} for name in endog_names}
        for j, name in enumerate(endog_names):
            stats_[name].update(gmm_point=float(fit.theta[j]), se_conventional=float(se_c[j]),
                                se_robust=float(se_r[j]), me_bound_se=float(se_me[j]))
        if "RSS-ME" in estimators:
            ss = split_sample(model, data, spec, S, seed)
            for j, name in enumerate(endog_names):
                stats_[name].update(rss_median=float(ss.theta_median[j]), rss_se=float(ss.se_median[j]))
        if "ME-boot" in estimators:
            sd = me_bootstrap(model, data, spec, fit, B, seed, idx=idx).sd()
            for j, name in enumerate(endog_names):
                stats_[name]["me_boot_sd"] = float(sd[j])
        for est, fn in (("DR", dr_bootstrap), ("HH", hh_bootstrap)):
            if est not in estimators:
                continue
            ci = percentile_ci(fn(model, data, spec, fit, B, seed, idx=idx), alpha)
            key = est.lower()
            for j, name in enumerate(endog_names):
                stats_[name].update({f"{key}_ci_lo": float(ci[j, 0]), f"{key}_ci_hi": float(ci[j, 1])})
        panel = {"weight": spec.label(), "parameters": stats_, "J": fit.J,
                 "J_pvalue": fit.J_pvalue if m > p else float("nan")}
        panels[wtext] = panel
    diag = {"n": n, "dropped_rows": dropped, "excluded_instruments": n_excluded,
            "exogenous_controls": p - len(endog_names)}
    for j, name in enumerate(endog_names):
        diag[f"first_stage_F[{name}]"] = first_stage_f(X[:, j], Z, n_excluded)
    if m > p:
        two_step = solve_gmm(model, data, build_weight(WeightSpec("s11"), model, data)[0])
        diag["hansen_J"], diag["J_pvalue"] = two_step.J, two_step.J_pvalue
    diag["RESET_F"], diag["RESET_pvalue"] = reset_test(y, X[:, 0], Z)
    return {"panels": panels, "diagnostics": diag}


def _records(report):
    for wtext, panel in report["panels"].items():
        for name, st in panel["parameters"].items():
            for k, v in st.items():
                yield wtext, name, k, v
        yield wtext, "", "J", panel["J"]
        yield wtext, "", "J_pvalue", panel["J_pvalue"]
    for k, v in report["diagnostics"].items():
        yield "diagnostics", "", k, v


def render(report, kind: str) -> str:
    if kind == "csv":
        lines = ["panel,parameter,statistic,value"]
        for panel, name, k, v in _records(report):
            val = repr(float(v)) if isinstance(v, float) else str(v)
            lines.append(",".join([panel, name, k, val]))
        return "\n".join(lines) + "\n"
    if kind == "json":
        return json.dumps(_round6(report), indent=2) + "\n"
    out = []
    for wtext, panel in report["panels"].items():
        names = list(panel["parameters"])
        out.append(f"### W = {panel['weight']} ({wtext})\n")
        out.append("| statistic | " + " | ".join(names) + " |")
        out.append("|---|" + "---|" * len(names))
        keys = list(dict.fromkeys(k for st in panel["parameters"].values() for k in st))
        for k in keys:
            out.append(f"| {k} | " + " | ".join(fmt(panel["parameters"][nm].get(k, float("nan")))
                                                 for nm in names) + " |")
        out.append(f"| J (p-value) | {fmt(panel['J'])} ({fmt(panel['J_pvalue'])})" + " |" * len(names))
        out.append("")
    out.append("### Diagnostics\n")
    out.append("| statistic | value |")
    out.append("|---|---|")
    for k, v in report["diagnostics"].items():
        out.append(f"| {k} | {fmt(v)} |")
    return "\n".join(out) + "\n"


def cmd_fit(args) -> int:
    endog, iv, controls = _names(args.endog), _names(args.iv), _names(args.controls)
    if not endog:
        raise InputError("--endog: at least one endogenous regressor required")
    if not iv:
        raise InputError("--iv: at least one instrument required")
    roles = [args.outcome] + endog + iv + controls
    if len(set(roles)) != len(roles):
        raise InputError("column roles must be disjoint")
    if len(iv) < len(endog):
        raise InputError(f"order condition fails: {len(iv)} instruments for {len(endog)} endogenous regressors")
    estimators = _names(args.estimators)
    bad = [e for e in estimators if e not in FIT_ESTIMATORS]
    if bad or not estimators:
        raise InputError(f"--estimators: unknown {bad}; choose from {list(FIT_ESTIMATORS)}")
    if args.B < 20 or args.S < 1 or not 0 < args.alpha < 1:
        raise InputError("need B >= 20, S >= 1 and alpha in (0, 1)")
    weights = []
    for wtext in args.weight or ["identity"]:
        try:
            weights.append((wtext, WeightSpec.parse(wtext)))
        except (ValueError, OSError) as exc:
            raise InputError(f"--weight {wtext}: {exc}") from exc
    cols, dropped = read_columns(args.data, roles)
    y, X, Z = build_iv_data(cols, args.outcome, endog, iv, controls, args.constant)
    if len(y) < 4:
        raise InputError(f"only {len(y)} complete rows")
    if dropped:
        log.warning("dropped %d rows with missing values", dropped)
    report = fit_report(y, X, Z, endog_names=endog, n_excluded=len(iv), weights=weights,
                        estimators=estimators, B=args.B, S=args.S, alpha=args.alpha,
                        seed=args.seed, dropped=dropped)
    text = render(report, args.format)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- simulate / analytic


def cmd_simulate(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    cfg = SimConfig.from_json(path.read_text())
    res = run_mc(cfg, threads=args.threads)
    out = Path(args.out_dir) if args.out_dir else path.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    (out / f"{stem}_results.csv").write_text(res.to_csv())
    table = res.to_table()
    (out / f"{stem}_table.txt").write_text(table)
    (out / f"{stem}_meta.json").write_text(res.metadata_json())
    sys.stdout.write(table)
    return EXIT_OK


def parse_grid(text: str) -> np.ndarray:
    """``a:b:step`` (inclusive of b), a comma list, or a single value."""
    try:
        if ":" in text:
            a, b, step = (float(t) for t in text.split(":"))
            if step <= 0 or b < a:
                raise InputError(f"bad grid {text!r}: need a <= b and step > 0")
            k = int(math.floor((b - a) / step + 1e-9))
            grid = a + step * np.arange(k + 1)
        else:
            grid = np.array([float(t) for t in text.split(",")])
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"bad grid {text!r}") from exc
    if np.any(np.abs(grid) >= 1):
        raise InputError(f"rho grid must lie in (-1, 1); got {text!r}")
    return np.round(grid, 12) + 0.0  # no signed zeros in output


ANALYTIC_FIELDS = ("rho", "theta_w", "v_gmm", "v_me", "w1", "w2", "efficiency_gain")


def cmd_analytic(args) -> int:
    grid = parse_grid(args.rho_grid)
    rows = [analytic_example(float(r)) for r in grid]
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ANALYTIC_FIELDS)
            for r in rows:
                w.writerow([repr(float(v)) for v in r])
    print(",".join(ANALYTIC_FIELDS))
    for r in rows:
        print(",".join(fmt(v) for v in r))
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="megmm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="linear IV GMM with ME diagnostics on a CSV file")
    f.add_argument("--data", required=True)
    f.add_argument("--outcome", required=True)
    f.add_argument("--endog", required=True, help="comma-separated endogenous regressors")
    f.add_argument("--iv", required=True, help="comma-separated excluded instruments")
    f.add_argument("--controls", default="", help="comma-separated exogenous controls")
    f.add_argument("--constant", action="store_true", help="append an intercept to the controls")
    f.add_argument("--weight", action="append",
                   help="identity|zz|s11|s112|fixed:<path>; repeat for several panels")
    f.add_argument("--estimators", default="GMM,ME-boot,RSS-ME,DR", help=f"subset of {','.join(FIT_ESTIMATORS)}")
    f.add_argument("--B", type=int, default=500)
    f.add_argument("--S", type=int, default=50)
    f.add_argument("--alpha", type=float, default=0.05)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--threads", type=int, default=1)
    f.add_argument("--format", choices=("csv", "markdown", "json"), default="markdown")
    f.add_argument("--output", help="write the report here instead of stdout")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a Monte Carlo config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analytic", help="closed-form curves of the two-instrument example")
    a.add_argument("--rho-grid", required=True, help="a:b:step, comma list or single value")
    a.add_argument("--output", help="CSV path (full precision)")
    a.set_defaults(func=cmd_analytic)
    return ap


def _bind_grid(argv: list) -> list:
    """Let ``--rho-grid -0.9:0.9:0.1`` through; argparse would read the value as a flag."""
    out = list(argv)
    for i, a in enumerate(out[:-1]):
        if a == "--rho-grid":
            out[i:i + 2] = [f"--rho-grid={out[i + 1]}"]
            break
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_bind_grid(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EstimationError, ConvergenceError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
