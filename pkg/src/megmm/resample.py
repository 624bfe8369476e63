"""Recentered bootstraps (Hall-Horowitz, ME-GMM, double-recentered) and repeated sample splitting.

Every replicate b draws its indices from ``default_rng(SeedSequence([base_seed, b]))``
so HH, ME and DR runs with the same seed see the same resamples, and results do not
depend on how replicates are scheduled.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import kernels
from ._linalg import COND_CAP, inv_spd, sym
from ._solver import newton_minimize, newton_root
from .covariance import SigmaParts, a_matrices, standard_errors
from .estimate import EstimationError, GmmFit, WeightSpec, build_weight, fit_from_theta, solve_gmm
from .me import Recentering, oracle_me
from .model import DataSet, MomentModel, sample_means

MAD_SCALE = 1.4826
MAX_FAILURE_RATE = 0.05


@dataclass
class DrawSet:
    draws: np.ndarray
    kind: str
    base_seed: int
    failures: int = 0
    converged: np.ndarray | None = None
    center: np.ndarray | None = None
    t_stats: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.converged is None:
            self.converged = np.all(np.isfinite(self.draws), axis=1)
        if len(self.draws) == 0:
            raise ValueError("empty draw set")

    @property
    def B(self) -> int:
        return self.draws.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.draws[self.converged]

    @property
    def reliable(self) -> bool:
        return self.failures / self.B <= MAX_FAILURE_RATE

    def sd(self) -> np.ndarray:
        return np.std(self.valid, axis=0, ddof=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate"] + [f"theta_{j}" for j in range(self.draws.shape[1])] + ["converged"])
            for b, (row, ok) in enumerate(zip(self.draws, self.converged)):
                w.writerow([b] + [repr(float(v)) for v in row] + [int(ok)])


def replicate_rng(base_seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(b)]))


def resample_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws with replacement from {0, ..., n-1}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.integers(0, n, size=n)


def index_matrix(n: int, B: int, base_seed: int) -> np.ndarray:
    """(B, n) resample indices, row b generated from its own replicate stream."""
    return np.stack([resample_indices(n, replicate_rng(base_seed, b)) for b in range(B)])


def _weight_spec(W) -> WeightSpec:
    if isinstance(W, WeightSpec):
        return W
    if isinstance(W, str):
        return WeightSpec.parse(W)
    return WeightSpec("fixed", np.asarray(W, dtype=float))


def _batch_solve(bread: np.ndarray, rhs: np.ndarray):
    """Solve bread[b] x = rhs[b]; rows whose bread is singular come back NaN.

    A zero right-hand side gives a zero step even when the bread is singular:
    theta_hat then solves the replicate equation exactly.
    """
    B, p = rhs.shape
    out = np.full((B, p), np.nan)
    zero = ~np.any(rhs, axis=1)
    out[zero] = 0.0
    with np.errstate(all="ignore"):
        c = np.linalg.cond(bread)
    ok = np.isfinite(c) & (c < COND_CAP) & ~zero
    if np.any(ok):
        out[ok] = np.linalg.solve(bread[ok], rhs[ok][..., None])[..., 0]
    return out


def _lift(model: MomentModel, delta: np.ndarray) -> np.ndarray:
    """(m, mp) map sending vec(G') to G @ delta (row-stacked layout)."""
    return np.kron(np.eye(model.m), delta[None, :])


def _linear_bootstrap_weights(spec: WeightSpec, model, data, fit, idx, means, covs):
    """W* per replicate for linear models, from resampled means/covariances of psi(theta_hat)."""
    B = idx.shape[0]
    m, p = model.m, model.p
    if not spec.data_dependent:
        return np.broadcast_to(fit.W, (B, m, m))
    if spec.kind == "zz":
        _, _, Z = model.split(data.rows)
        zz = (Z[:, :, None] * Z[:, None, :]).reshape(len(Z), m * m)
        Q = kernels.resampled_means(zz, idx).reshape(B, m, m)
        return np.stack([inv_spd(q, name="Z*'Z*/n") for q in Q])
    Ws = np.empty((B, m, m))
    pilot_spec = spec.pilot
    for b in range(B):
        Gb = means[b, m:].reshape(m, p)
        Sig = covs[b]
        if spec.kind == "s112":
            parts = SigmaParts.from_sigma(Sig, m, p)
            Ws[b] = inv_spd(parts.S11_2, name="Sigma11_2*")
            continue
        # s11: pilot fit on the bootstrap sample, then Sigma11 transported to the pilot theta
        if pilot_spec.kind in ("identity", "fixed"):
            W0 = np.eye(m) if pilot_spec.kind == "identity" else np.asarray(pilot_spec.matrix)
        else:
            raise EstimationError("nested data-dependent pilot not supported in the linear bootstrap")
        gb = means[b, :m]
        step = -np.linalg.solve(Gb.T @ W0 @ Gb, Gb.T @ W0 @ gb)
        L = np.hstack([np.eye(m), _lift(model, step)])
        Ws[b] = inv_spd(L @ Sig @ L.T, name="Sigma11*")
    return Ws


def _recentered_means(model, data, fit, idx, need_cov: bool):
    psi = model.psi_all(data, fit.theta)
    if need_cov:
        means, covs = kernels.resampled_cov(psi, idx)
    else:
        means, covs = kernels.resampled_means(psi, idx), None
    return psi.mean(axis=0), means, covs


def recentered_psi(model: MomentModel, data, fit: GmmFit, idx) -> np.ndarray:
    """psi*_n(theta_hat) - psi_n(theta_hat) for one resample."""
    psi = model.psi_all(data, fit.theta)
    return psi[np.asarray(idx)].mean(axis=0) - psi.mean(axis=0)


def _finish(kind, draws, seed, center, t=None) -> DrawSet:
    ok = np.all(np.isfinite(draws), axis=1)
    fails = int(np.sum(~ok))
    ds = DrawSet(draws, kind, seed, fails, ok, np.asarray(center, dtype=float), t)
    if not ds.reliable:
        warnings.warn(f"{kind} bootstrap discarded {fails}/{ds.B} replicates", RuntimeWarning, stacklevel=3)
    return ds


def _take(data: DataSet, idx) -> DataSet:
    return DataSet(data.rows[idx])


def hh_bootstrap(model: MomentModel, data, W, fit: GmmFit, B: int, seed: int, *, idx=None) -> DrawSet:
    """Hall-Horowitz bootstrap: recenter the moments at g_n(theta_hat) only."""
    spec = _weight_spec(W)
    idx = index_matrix(data.n, B, seed) if idx is None else np.asarray(idx)
    m, p = model.m, model.p
    if model.is_linear:
        need_cov = m > p and spec.kind in ("s11", "s112")
        psi_bar, means, covs = _recentered_means(model, data, fit, idx, need_cov)
        Gs = means[:, m:].reshape(-1, m, p)
        r = means[:, :m] - psi_bar[:m]
        if m == p:
            # just-identified: W* cancels, g*_n(theta) = g_n(theta_hat) solved directly
            return _finish("HH", fit.theta - _batch_solve(Gs, r), seed, fit.theta)
        Ws = _linear_bootstrap_weights(spec, model, data, fit, idx, means, covs)
        GtW = np.einsum("bjk,bjl->bkl", Gs, Ws)
        bread = GtW @ Gs
        step = _batch_solve(bread, np.einsum("bkl,bl->bk", GtW, r))
        return _finish("HH", fit.theta - step, seed, fit.theta)
    draws = np.full((idx.shape[0], p), np.nan)
    for b, ib in enumerate(idx):
        try:
            draws[b] = _hh_replicate(model, _take(data, ib), spec, fit)
        except (EstimationError, np.linalg.LinAlgError):
            pass
    return _finish("HH", draws, seed, fit.theta)


def _hh_replicate(model, data_b, spec, fit):
    Wb = build_weight(spec, model, data_b)[0] if spec.data_dependent else fit.W
    target = fit.g

    def objective(theta):
        sm = sample_means(model, data_b, theta)
        r = sm.g - target
        Wr = Wb @ r
        gn = 2.0 * sm.G.T @ Wb @ sm.G
        curv = 2.0 * np.kron(Wr[None, :], np.eye(model.p)) @ sm.F
        return float(r @ Wr), 2.0 * sm.G.T @ Wr, gn + curv, gn

    res = newton_minimize(objective, fit.theta)
    if not res.converged:
        raise EstimationError("HH replicate did not converge")
    return res.x


def me_bootstrap(model: MomentModel, data, W, fit: GmmFit, B: int, seed: int, *, idx=None) -> DrawSet:
    """Bootstrap ME-GMM: both blocks recentered at psi_n(theta_hat), Delta = Sigma_hat(theta_hat)^-1."""
    idx = index_matrix(data.n, B, seed) if idx is None else np.asarray(idx)
    m, p = model.m, model.p
    Delta = inv_spd(fit.sigma.Sigma, name="Sigma", structural_zeros=True)
    if model.is_linear:
        psi_bar, means, _ = _recentered_means(model, data, fit, idx, False)
        Gs = means[:, m:].reshape(-1, m, p)
        # Gamma* = [G*; 0]  =>  Gamma*' Delta = G*' Delta[:m, :]
        GtD = np.einsum("bjk,jl->bkl", Gs, Delta[:m, :])
        bread = np.einsum("bkj,bjl->bkl", GtD[:, :, :m], Gs)
        step = _batch_solve(bread, np.einsum("bkl,bl->bk", GtD, means - psi_bar))
        return _finish("ME", fit.theta - step, seed, fit.theta)
    target = sample_means(model, data, fit.theta).psi
    draws = np.full((idx.shape[0], p), np.nan)
    for b, ib in enumerate(idx):
        data_b = _take(data, ib)

        def objective(theta, data_b=data_b):
            sm = sample_means(model, data_b, theta)
            r = sm.psi - target
            Gam = np.vstack([sm.G, sm.F])
            Dr = Delta @ r
            gn = 2.0 * Gam.T @ Delta @ Gam
            return float(r @ Dr), 2.0 * Gam.T @ Dr, gn, gn

        res = newton_minimize(objective, fit.theta)
        if res.converged:
            draws[b] = res.x
    return _finish("ME", draws, seed, fit.theta)


def dr_bootstrap(model: MomentModel, data, W, fit: GmmFit, B: int, seed: int, *, idx=None,
                 jacobian_correction: bool = True, percentile_t: bool = False) -> DrawSet:
    """Double-recentered bootstrap: solve A_n(W, theta_hat) psi~*_n(theta) = 0.

    With ``jacobian_correction=False`` the replicate solves the Hall-Horowitz
    first-order condition instead, so draws coincide with ``hh_bootstrap``.
    ``percentile_t`` also stores t* = (theta* - theta_hat) / robust SE*.
    """
    m, p = model.m, model.p
    if not jacobian_correction or (m == p and not percentile_t):
        # m == p: the first-order condition forces g_n(theta_hat) = 0, so the correction
        # term vanishes and the replicate equation is exactly the Hall-Horowitz one
        ds = hh_bootstrap(model, data, W, fit, B, seed, idx=idx)
        ds.kind = "DR"
        return ds
    idx = index_matrix(data.n, B, seed) if idx is None else np.asarray(idx)
    A = a_matrices(fit.G, fit.g, fit.F, fit.W).A
    if model.is_linear:
        psi_bar, means, _ = _recentered_means(model, data, fit, idx, False)
        Gs = means[:, m:].reshape(-1, m, p)
        bread = np.einsum("kj,bjl->bkl", A[:, :m], Gs)
        step = _batch_solve(bread, (means - psi_bar) @ A.T)
        draws = fit.theta - step
    else:
        target = sample_means(model, data, fit.theta).psi
        draws = np.full((idx.shape[0], p), np.nan)
        for b, ib in enumerate(idx):
            data_b = _take(data, ib)

            def system(theta, data_b=data_b):
                sm = sample_means(model, data_b, theta)
                return A @ (sm.psi - target), A @ np.vstack([sm.G, sm.F])

            res = newton_root(system, fit.theta)
            if res.converged:
                draws[b] = res.x
    t = None
    if percentile_t:
        t = np.full_like(draws, np.nan)
        for b, ib in enumerate(idx):
            if not np.all(np.isfinite(draws[b])):
                continue
            try:
                fb = fit_from_theta(model, _take(data, ib), fit.W, draws[b])
            except (EstimationError, np.linalg.LinAlgError, ValueError):
                continue
            t[b] = (draws[b] - fit.theta) / standard_errors(fb.var_robust, data.n)
    return _finish("DR", draws, seed, fit.theta, t)


def percentile_ci(draws: DrawSet | np.ndarray, alpha: float = 0.05) -> np.ndarray:
    """Type-7 empirical (alpha/2, 1 - alpha/2) quantiles; shape (p, 2)."""
    x = draws.valid if isinstance(draws, DrawSet) else np.atleast_1d(np.asarray(draws, dtype=float))
    x = x.reshape(len(x), -1)
    if len(x) < 20:
        raise ValueError(f"need at least 20 surviving draws, got {len(x)}")
    q = np.quantile(x, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    return q.T


def percentile_t_ci(draws: DrawSet, fit: GmmFit, alpha: float = 0.05) -> np.ndarray:
    if draws.t_stats is None:
        raise ValueError("draw set carries no t statistics; rerun with percentile_t=True")
    t = draws.t_stats[np.all(np.isfinite(draws.t_stats), axis=1)]
    if len(t) < 20:
        raise ValueError(f"need at least 20 surviving draws, got {len(t)}")
    q = np.quantile(t, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    se = fit.se("robust")
    return np.column_stack([fit.theta - q[1] * se, fit.theta - q[0] * se])


def robust_sd(draws: DrawSet | np.ndarray) -> np.ndarray:
    """1.4826 * median |b - median(b)| per coordinate."""
    x = draws.valid if isinstance(draws, DrawSet) else np.atleast_1d(np.asarray(draws, dtype=float))
    x = x.reshape(len(x), -1)
    if len(x) < 20:
        raise ValueError(f"need at least 20 surviving draws, got {len(x)}")
    med = np.median(x, axis=0)
    return MAD_SCALE * np.median(np.abs(x - med), axis=0)


class SplitSample(NamedTuple):
    draws: DrawSet
    variances: np.ndarray
    theta_mean: np.ndarray
    sd_mean: np.ndarray
    theta_median: np.ndarray
    var_median: np.ndarray

    @property
    def se_median(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.var_median), 0.0, None))

    def ci_median(self, alpha: float = 0.05) -> np.ndarray:
        z = stats.norm.ppf(1 - alpha / 2)
        se = self.se_median
        return np.column_stack([self.theta_median - z * se, self.theta_median + z * se])


def split_halves(n: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    h = math.ceil(n / 2)
    return np.sort(perm[:h]), np.sort(perm[h:])


def _one_split(model, data, spec, rng, skip_gamma1):
    last = None
    for _ in range(10):
        i1, i2 = split_halves(data.n, rng)
        d1, d2 = _take(data, i1), _take(data, i2)
        try:
            W2, _ = build_weight(spec, model, d2)
            fit2 = solve_gmm(model, d2, W2)
            g1 = np.zeros(model.m) if skip_gamma1 else fit2.g
            gam = Recentering(g1, fit2.G.reshape(-1), "split-estimate")
            W1, _ = build_weight(spec, model, d1)
            res = oracle_me(model, d1, W1, gam)
            return res.theta, res.var / d1.n
        except (EstimationError, np.linalg.LinAlgError) as exc:
            last = exc
    raise EstimationError(f"split-sample estimate failed after 10 redraws: {last}")


def split_sample(model: MomentModel, data, W, S: int, seed: int, *, skip_gamma1: bool | None = None) -> SplitSample:
    """Repeated random half-splits: gamma from half 2, ME estimate on half 1.

    Aggregates with the mean rule (mean, between-split SD) and the median rule
    median{V_s + (theta_s - theta_med)(theta_s - theta_med)'}.
    """
    if data.n < 4:
        raise ValueError("split_sample needs n >= 4")
    if S < 1:
        raise ValueError("S must be >= 1")
    spec = _weight_spec(W)
    if skip_gamma1 is None:
        skip_gamma1 = model.is_linear and spec.kind == "s112"
    p = model.p
    thetas = np.empty((S, p))
    Vs = np.empty((S, p, p))
    for s in range(S):
        thetas[s], Vs[s] = _one_split(model, data, spec, replicate_rng(seed, s), skip_gamma1)
    med = np.median(thetas, axis=0)
    dev = thetas - med
    var_med = np.median(Vs + dev[:, :, None] * dev[:, None, :], axis=0)
    mean = thetas.mean(axis=0)
    sd = thetas.std(axis=0, ddof=1) if S > 1 else np.zeros(p)
    ds = DrawSet(thetas, "SplitSample", seed, 0)
    return SplitSample(ds, Vs, mean, sd, med, sym(var_med))
