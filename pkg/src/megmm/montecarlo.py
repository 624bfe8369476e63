"""Simulation designs, population oracles and the Monte Carlo driver."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .estimate import EstimationError, WeightSpec, build_weight, fit_gmm, linear_gmm_theta, solve_gmm
from .me import Recentering, oracle_me
from .model import DataSet, LinearIV
from .resample import dr_bootstrap, hh_bootstrap, index_matrix, percentile_ci, split_sample

log = logging.getLogger(__name__)

ESTIMATORS = ("GMM-conv", "GMM-robust", "OracleME", "RSS-ME", "HH", "DR")
ORACLE_MAX_ROWS = 5_000_000


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- designs


@dataclass(frozen=True)
class LinearDesign:
    """Y = X theta + Z'gamma + eps, X = Z'Pi + v, Z ~ N(0, I_m), (eps, v) ~ N(0, [[1, r], [r, 1]])."""

    theta: float
    Pi: np.ndarray
    gamma: np.ndarray
    error_corr: float = 0.5

    def __post_init__(self):
        Pi = np.asarray(self.Pi, dtype=float).reshape(-1)
        gamma = np.asarray(self.gamma, dtype=float).reshape(-1)
        if Pi.shape != gamma.shape:
            raise ValueError("Pi and gamma must have the same length")
        if not -1.0 < self.error_corr < 1.0:
            raise ValueError("error_corr must lie in (-1, 1)")
        object.__setattr__(self, "Pi", Pi)
        object.__setattr__(self, "gamma", gamma)

    @property
    def m(self) -> int:
        return self.Pi.size

    @property
    def model(self) -> LinearIV:
        return LinearIV(self.m, 1)

    def generate(self, n: int, rng: np.random.Generator) -> DataSet:
        Z = rng.standard_normal((n, self.m))
        e = rng.standard_normal((n, 2))
        r = self.error_corr
        eps = e[:, 0]
        v = r * e[:, 0] + math.sqrt(1.0 - r * r) * e[:, 1]
        X = Z @ self.Pi + v
        y = X * self.theta + Z @ self.gamma + eps
        return self.model.dataset(y, X[:, None], Z)

    def _forms(self):
        m = self.m
        lx = np.concatenate([self.Pi, [0.0, 1.0]])
        ly = self.theta * lx + np.concatenate([self.gamma, [1.0, 0.0]])
        C = np.eye(m + 2)
        C[m, m + 1] = C[m + 1, m] = self.error_corr
        return lx, ly, C

    def population_sigma(self, theta_at: float):
        """Exact (E[psi], Cov[psi]) at theta_at.

        Every entry of psi is a quadratic form u'Au in the Gaussian vector
        u = (Z, eps, v), so E = tr(AC) and Cov = 2 tr(A C B C).
        """
        lx, ly, C = self._forms()
        r = ly - theta_at * lx
        forms = []
        for j in range(self.m):
            e = np.zeros(self.m + 2)
            e[j] = 1.0
            forms.append(np.outer(e, r))
        for j in range(self.m):
            e = np.zeros(self.m + 2)
            e[j] = 1.0
            forms.append(-np.outer(e, lx))
        forms = [0.5 * (A + A.T) for A in forms]
        mu = np.array([np.trace(A @ C) for A in forms])
        AC = [A @ C for A in forms]
        cov = np.array([[2.0 * np.trace(a @ b) for b in AC] for a in AC])
        return mu, cov

    def recentering(self, theta_w: float) -> Recentering:
        """Population (E[g(theta_W)], vec E[G]') with E[ZZ'] = I."""
        return Recentering(self.Pi * (self.theta - theta_w) + self.gamma, -self.Pi, "oracle")


def population_sigma(design: LinearDesign, theta_at: float):
    return design.population_sigma(theta_at)


def concentration_to_pi(target: float, n: int) -> float:
    """pi with 5 n pi^2 = 2 target, i.e. mu^2/m = target for Pi = (pi, 2 pi), m = 2."""
    if target <= 0:
        raise ValueError("concentration target must be positive")
    if n < 1:
        raise ValueError("n must be positive")
    return math.sqrt(2.0 * target / (5.0 * n))


def mc_design(delta: float, concentration: float = 50.0, concentration_n: int = 200) -> LinearDesign:
    pi = concentration_to_pi(concentration, concentration_n)
    return LinearDesign(1.0, np.array([pi, 2.0 * pi]), np.array([0.0, delta]))


def analytic_design() -> LinearDesign:
    return LinearDesign(0.0, np.array([1.0, 2.0]), np.array([0.0, 1.0]))


def rho_weight(rho: float) -> np.ndarray:
    return np.array([[1.0, rho], [rho, 1.0]])


# --------------------------------------------------------------------------- closed forms


def pseudo_true_linear(Pi, gamma, theta, W) -> float:
    """theta_W = (Pi'W Pi)^-1 Pi'W (Pi theta + gamma) when E[ZZ'] = I."""
    Pi = np.asarray(Pi, dtype=float).reshape(-1)
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    W = np.asarray(W, dtype=float)
    den = float(Pi @ W @ Pi)
    if abs(den) < 1e-14 * max(1.0, float(np.abs(W).max()) * float(Pi @ Pi)):
        raise EstimationError("singular Pi'W Pi")
    return float(Pi @ W @ (Pi * theta + gamma)) / den


def tsls_weights(Pi, gamma, theta, W):
    """theta_W as sum_j w_j theta_j over single-instrument estimands theta_j.

    Returns (w, theta_j) with w_j = (Pi'W)_j Pi_j / Pi'W Pi.
    """
    Pi = np.asarray(Pi, dtype=float).reshape(-1)
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    PW = Pi @ np.asarray(W, dtype=float)
    w = PW * Pi / float(PW @ Pi)
    return w, theta + gamma / Pi


class AnalyticExample(NamedTuple):
    rho: float
    theta_w: float
    v_gmm: float
    v_me: float
    w1: float
    w2: float
    efficiency_gain: float


V_ME_ANALYTIC = 969.0 / 6116.0


def analytic_example(rho: float) -> AnalyticExample:
    """Closed forms for the two-instrument example with W(rho) = [[1, rho], [rho, 1]]."""
    if not -1.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (-1, 1), got {rho}")
    d = 5.0 + 4.0 * rho
    theta_w = (rho + 2.0) / d
    v_gmm = 2.0 * (56 * rho**4 + 131 * rho**3 + 210 * rho**2 + 232 * rho + 100) / d**4
    w1 = (1.0 + 2.0 * rho) / d
    w2 = 2.0 * (rho + 2.0) / d
    return AnalyticExample(rho, theta_w, v_gmm, V_ME_ANALYTIC, w1, w2, 1.0 - V_ME_ANALYTIC / v_gmm)


def population_variances(design: LinearDesign, W) -> tuple[float, float, float]:
    """(theta_W, V_GMM(W), V_ME) from the exact population moments, p = 1."""
    W = np.asarray(W, dtype=float)
    th = pseudo_true_linear(design.Pi, design.gamma, design.theta, W)
    mu, S = design.population_sigma(th)
    m = design.m
    G, g = mu[m:].reshape(m, 1), mu[:m]
    A = np.hstack([G.T @ W, (g @ W)[None, :]])
    H = float((A[:, :m] @ G).item())
    v_gmm = float((A @ S @ A.T).item()) / H**2
    S11_2 = S[:m, :m] - S[:m, m:] @ np.linalg.solve(S[m:, m:], S[m:, :m])
    v_me = 1.0 / float((G.T @ np.linalg.solve(S11_2, G)).item())
    return th, v_gmm, v_me


def pseudo_true_population(design: LinearDesign, spec: WeightSpec) -> float:
    """Exact theta_W for the Gaussian linear design, including data-dependent specs."""
    m = design.m
    if spec.kind in ("identity", "zz"):
        return pseudo_true_linear(design.Pi, design.gamma, design.theta, np.eye(m))
    if spec.kind == "fixed":
        return pseudo_true_linear(design.Pi, design.gamma, design.theta, spec.matrix)
    th0 = pseudo_true_population(design, spec.pilot)
    _, S = design.population_sigma(th0)
    if spec.kind == "s11":
        block = S[:m, :m]
    else:
        block = S[:m, :m] - S[:m, m:] @ np.linalg.solve(S[m:, m:], S[m:, :m])
    return pseudo_true_linear(design.Pi, design.gamma, design.theta, np.linalg.inv(block))


def pseudo_true_datadependent(design: LinearDesign, spec: WeightSpec, *, n_oracle: int = 1_000_000,
                              seed: int = 0) -> float:
    """Plug-in theta_W: one sample of n_oracle rows, weight resolved on it, GMM solved."""
    if n_oracle > ORACLE_MAX_ROWS:
        raise MemoryError(f"oracle sample of {n_oracle} rows exceeds the {ORACLE_MAX_ROWS} cap")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0AC1E]))
    data = design.generate(n_oracle, rng)
    return float(fit_gmm(design.model, data, spec).theta[0])


# --------------------------------------------------------------------------- configuration


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class SimConfig:
    n: list = field(default_factory=lambda: [1000])
    delta: list = field(default_factory=lambda: [1.0])
    concentration: float = 50.0
    concentration_n: int = 200
    weight: str = "identity"
    estimators: list = field(default_factory=lambda: list(ESTIMATORS))
    replications: int = 500
    B: int = 500
    S: int = 50
    seed: int = 20240101
    alpha: float = 0.05
    pseudo_true: str = "plugin"
    oracle_n: int = 1_000_000
    benchmark_sd: float | None = None

    def __post_init__(self):
        self.n = [int(v) for v in _as_list(self.n)]
        self.delta = [float(v) for v in _as_list(self.delta)]
        self.estimators = list(self.estimators)
        self.validate()

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if not self.n or any(v < 50 for v in self.n):
            bad("n", "every sample size must be >= 50")
        if not self.delta or any(not math.isfinite(d) or d < 0 for d in self.delta):
            bad("delta", "every delta must be finite and >= 0")
        if not self.concentration > 0:
            bad("concentration", "must be > 0")
        if self.concentration_n < 1:
            bad("concentration_n", "must be >= 1")
        try:
            self.weight_spec
        except (ValueError, OSError) as exc:
            bad("weight", str(exc))
        if not self.estimators:
            bad("estimators", "must name at least one estimator")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            bad("estimators", f"unknown {unknown}; choose from {list(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            bad("estimators", "duplicates")
        if self.replications < 1:
            bad("replications", "must be >= 1")
        if self.B < 20 and ("HH" in self.estimators or "DR" in self.estimators):
            bad("B", "must be >= 20 for percentile intervals")
        if self.S < 1:
            bad("S", "must be >= 1")
        if not 0 < self.alpha < 1:
            bad("alpha", "must lie in (0, 1)")
        if self.pseudo_true not in ("plugin", "population"):
            bad("pseudo_true", "must be 'plugin' or 'population'")
        if not 0 <= self.seed < 2**64:
            bad("seed", "must be a 64-bit unsigned integer")

    @property
    def weight_spec(self) -> WeightSpec:
        return WeightSpec.parse(self.weight)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"{extra[0]}: unknown field (known: {sorted(known)})")
        for name in ("n", "replications", "B", "S", "seed", "concentration_n", "oracle_n"):
            if name in d:
                for v in _as_list(d[name]):
                    if isinstance(v, bool) or not isinstance(v, int):
                        raise ConfigError(f"{name}: expected integer, got {v!r}")
        for name in ("delta", "concentration", "alpha"):
            if name in d:
                for v in _as_list(d[name]):
                    if isinstance(v, bool) or not isinstance(v, (int, float)):
                        raise ConfigError(f"{name}: expected number, got {v!r}")
        if "estimators" in d and not isinstance(d["estimators"], list):
            raise ConfigError("estimators: expected a list")
        if "weight" in d and not isinstance(d["weight"], str):
            raise ConfigError("weight: expected a string")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
        return cls.from_dict(d)


# --------------------------------------------------------------------------- driver


class Draw(NamedTuple):
    point: float
    lo: float
    hi: float
    boot_sd: float


def _wald(theta, se, z):
    return Draw(float(theta), float(theta - z * se), float(theta + z * se), float("nan"))


def _replication(cfg: SimConfig, design: LinearDesign, n: int, rep: int, theta_w: float) -> dict:
    """All requested estimators on one simulated sample; failures come back as None."""
    ss = np.random.SeedSequence([cfg.seed, n, rep])
    data_ss, boot_ss = ss.spawn(2)
    data = design.generate(n, np.random.default_rng(data_ss))
    boot_seed = int(boot_ss.generate_state(1, np.uint64)[0])
    model = design.model
    spec = cfg.weight_spec
    z = stats.norm.ppf(1 - cfg.alpha / 2)
    out: dict = {}
    try:
        W, _ = build_weight(spec, model, data)
        fit = solve_gmm(model, data, W)
    except (EstimationError, np.linalg.LinAlgError):
        return {e: None for e in cfg.estimators}
    ests = cfg.estimators
    if "GMM-conv" in ests:
        out["GMM-conv"] = _wald(fit.theta[0], fit.se("conventional")[0], z)
    if "GMM-robust" in ests:
        out["GMM-robust"] = _wald(fit.theta[0], fit.se("robust")[0], z)
    if "OracleME" in ests:
        try:
            res = oracle_me(model, data, W, design.recentering(theta_w), pilot=fit)
            out["OracleME"] = _wald(res.theta[0], math.sqrt(max(res.var[0, 0], 0.0) / n), z)
        except (EstimationError, np.linalg.LinAlgError):
            out["OracleME"] = None
    if "RSS-ME" in ests:
        try:
            ssr = split_sample(model, data, spec, cfg.S, boot_seed)
            lo, hi = ssr.ci_median(cfg.alpha)[0]
            out["RSS-ME"] = Draw(float(ssr.theta_median[0]), float(lo), float(hi), float("nan"))
        except (EstimationError, np.linalg.LinAlgError):
            out["RSS-ME"] = None
    if "HH" in ests or "DR" in ests:
        idx = index_matrix(n, cfg.B, boot_seed)
        for name, fn in (("HH", hh_bootstrap), ("DR", dr_bootstrap)):
            if name not in ests:
                continue
            try:
                ds = fn(model, data, spec, fit, cfg.B, boot_seed, idx=idx)
                lo, hi = percentile_ci(ds, cfg.alpha)[0]
                out[name] = Draw(float(fit.theta[0]), float(lo), float(hi), float(ds.sd()[0]))
            except (EstimationError, ValueError, np.linalg.LinAlgError):
                out[name] = None
    return out


@dataclass
class EstimatorSummary:
    estimator: str
    sd: float
    coverage: float
    len_median: float
    len_mean: float
    failures: int
    sd_kind: str


@dataclass
class CellResult:
    n: int
    delta: float
    pseudo_true: float
    summaries: dict


@dataclass
class SimResult:
    config: SimConfig
    cells: list
    normalization: float | None
    metadata: dict

    def cell(self, n: int, delta: float) -> CellResult:
        for c in self.cells:
            if c.n == n and c.delta == delta:
                return c
        raise KeyError((n, delta))

    def rows(self):
        for c in self.cells:
            for e in self.config.estimators:
                s = c.summaries[e]
                norm = s.sd / self.normalization if self.normalization else float("nan")
                yield {
                    "n": c.n, "delta": c.delta, "estimator": e, "sd": s.sd, "sd_normalized": norm,
                    "sd_kind": s.sd_kind, "coverage": s.coverage, "len_median": s.len_median,
                    "len_mean": s.len_mean, "failures": s.failures, "pseudo_true": c.pseudo_true,
                }

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = list(self.rows())
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text: rows = estimators, (SD, Cov, Len) triples per delta, one block per n."""
        deltas = self.config.delta
        sd_label = "SD/bench" if self.normalization else "SD"
        head = f"{'Estimator':<12}" + "".join(f" | delta={d:<19g}" for d in deltas)
        sub = f"{'':<12}" + "".join(f" | {sd_label:>8} {'Cov':>6} {'Len':>6}" for _ in deltas)
        lines = [f"W = {self.config.weight_spec.label()}", head, sub]
        for n in self.config.n:
            lines.append(f"n = {n}")
            for e in self.config.estimators:
                cells = []
                for d in deltas:
                    s = self.cell(n, d).summaries[e]
                    sd = s.sd / self.normalization if self.normalization else s.sd
                    cells.append(f" | {sd:8.2f} {s.coverage:6.3f} {s.len_median:6.3f}")
                lines.append(f"{e:<12}" + "".join(cells))
        if not self.normalization:
            lines.append("SD unnormalized: no delta=0 benchmark cell at the smallest n")
        return "\n".join(lines) + "\n"

    def metadata_json(self) -> str:
        return json.dumps(self.metadata, indent=2, sort_keys=True) + "\n"


def _summarize(name: str, draws: Sequence, target: float) -> EstimatorSummary:
    ok = [d for d in draws if d is not None and all(math.isfinite(x) for x in d[:3])]
    fails = len(draws) - len(ok)
    if not ok:
        nan = float("nan")
        return EstimatorSummary(name, nan, nan, nan, nan, fails, "none")
    pts = np.array([d.point for d in ok])
    lo = np.array([d.lo for d in ok])
    hi = np.array([d.hi for d in ok])
    length = hi - lo
    cov = float(np.mean((lo <= target) & (target <= hi)))
    if name in ("HH", "DR"):
        sd, kind = float(np.mean([d.boot_sd for d in ok])), "mean bootstrap SD"
    else:
        sd = float(np.std(pts, ddof=1)) if len(pts) > 1 else 0.0
        kind = "MC SD"
    return EstimatorSummary(name, sd, cov, float(np.median(length)), float(np.mean(length)), fails, kind)


def _map(fn, tasks, threads: int):
    if threads <= 1:
        return [fn(*t) for t in tasks]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=threads)(delayed(fn)(*t) for t in tasks)


def run_mc(cfg: SimConfig, *, threads: int = 1) -> SimResult:
    """Every (n, delta) cell, every replication, every requested estimator.

    Replication r of sample size n draws from SeedSequence([seed, n, r]), so results
    are independent of ``threads`` and the deltas share common random numbers.
    """
    spec = cfg.weight_spec
    cells = []
    for ci, delta in enumerate(cfg.delta):
        design = mc_design(delta, cfg.concentration, cfg.concentration_n)
        if not spec.data_dependent:
            W = np.eye(design.m) if spec.kind == "identity" else spec.matrix
            theta_w = pseudo_true_linear(design.Pi, design.gamma, design.theta, W)
        elif cfg.pseudo_true == "population" or spec.kind == "zz":
            theta_w = pseudo_true_population(design, spec)
        else:
            theta_w = pseudo_true_datadependent(design, spec, n_oracle=cfg.oracle_n, seed=cfg.seed + ci)
        for n in cfg.n:
            log.info("cell n=%d delta=%g theta_W=%.6f", n, delta, theta_w)
            tasks = [(cfg, design, n, r, theta_w) for r in range(cfg.replications)]
            reps = _map(_replication, tasks, threads)
            summaries = {e: _summarize(e, [r.get(e) for r in reps], theta_w) for e in cfg.estimators}
            cells.append(CellResult(n, delta, theta_w, summaries))
    norm = cfg.benchmark_sd
    if norm is None and 0.0 in cfg.delta:
        gmm = next((e for e in ("GMM-conv", "GMM-robust") if e in cfg.estimators), None)
        if gmm is not None:
            bench = next(c for c in cells if c.delta == 0.0 and c.n == min(cfg.n))
            norm = bench.summaries[gmm].sd
    meta = {
        "config": asdict(cfg),
        "normalization": norm,
        "normalized": norm is not None,
        "reportable": cfg.replications >= 100,
        "scale": {"replications": cfg.replications, "B": cfg.B, "S": cfg.S,
                  "reference_scale": {"replications": 2000, "B": 1000, "S": 100}},
        "versions": {"megmm": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    return SimResult(cfg, cells, norm, meta)
