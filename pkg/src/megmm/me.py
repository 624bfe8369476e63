"""Misspecification-efficient (ME) estimators and the gamma-sensitivity machinery."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from ._linalg import inv_spd, solve, sym
from ._solver import newton_minimize
from .covariance import SigmaParts, sigma_hat, var_me_bound
from .estimate import EstimationError, GmmFit, solve_gmm
from .model import MomentModel, sample_means


@dataclass(frozen=True)
class Recentering:
    """Hypothesized E[psi(X, theta_W)]: moment mean gamma1 and vec(E[G]') gamma2."""

    gamma1: np.ndarray
    gamma2: np.ndarray
    source: str = "oracle"

    def __post_init__(self):
        object.__setattr__(self, "gamma1", np.asarray(self.gamma1, dtype=float).reshape(-1))
        object.__setattr__(self, "gamma2", np.asarray(self.gamma2, dtype=float).reshape(-1))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.gamma1, self.gamma2])

    def check(self, model: MomentModel) -> "Recentering":
        if self.gamma1.shape != (model.m,) or self.gamma2.shape != (model.m * model.p,):
            raise ValueError(
                f"recentering has lengths ({self.gamma1.size}, {self.gamma2.size}); "
                f"model needs ({model.m}, {model.m * model.p})"
            )
        return self

    @classmethod
    def plug_in(cls, fit: GmmFit) -> "Recentering":
        return cls(fit.g, fit.G.reshape(-1), "plug-in")


class MEResult(NamedTuple):
    theta: np.ndarray
    var: np.ndarray
    pilot: GmmFit


def lambda_star(Gamma, Sigma) -> np.ndarray:
    """Optimal combination Gamma' Sigma^-1."""
    Sigma = Sigma.Sigma if isinstance(Sigma, SigmaParts) else np.asarray(Sigma, dtype=float)
    return np.asarray(Gamma).T @ inv_spd(Sigma, name="Sigma", structural_zeros=True)


def lambda_star_linear(G, sigma: SigmaParts):
    """Blocks (G' S11_2^-1, -G' S11_2^-1 S12 S22^-1) of the optimal combination."""
    G = np.atleast_2d(G)
    b1 = G.T @ inv_spd(sigma.S11_2, name="Sigma11_2")
    b2 = -b1 @ sigma.S12 @ inv_spd(sigma.S22, name="Sigma22", structural_zeros=True)
    return b1, b2


def _check_delta(Delta, k: int) -> np.ndarray:
    Delta = np.asarray(Delta, dtype=float)
    if Delta.shape != (k, k):
        raise ValueError(f"Delta has shape {Delta.shape}, expected ({k}, {k})")
    if not np.allclose(Delta, Delta.T, rtol=1e-10, atol=1e-12):
        raise ValueError("Delta must be symmetric")
    ev = np.linalg.eigvalsh(sym(Delta))
    if ev[0] < -1e-10 * max(1.0, abs(ev[-1])):
        raise ValueError("Delta must be positive semi-definite")
    return sym(Delta)


def me_gmm(model: MomentModel, data, Delta, gamma: Recentering, *, start=None,
           tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """argmin (psi_n(theta) - gamma)' Delta (psi_n(theta) - gamma).

    Linear models: psi_n(theta) = a + Gamma theta, solved in closed form.
    """
    gamma.check(model)
    Delta = _check_delta(Delta, model.k)
    c = gamma.vector
    p = model.p
    if model.is_linear:
        sm = sample_means(model, data, np.zeros(p))
        Gam = np.vstack([sm.G, np.zeros((model.m * p, p))])
        bread = Gam.T @ Delta @ Gam
        if np.linalg.matrix_rank(bread) < p:
            raise EstimationError("rank-deficient ME-GMM bread")
        return -solve(bread, Gam.T @ Delta @ (sm.psi - c), name="ME-GMM bread")

    def objective(theta):
        sm = sample_means(model, data, theta)
        r = sm.psi - c
        Gam = np.vstack([sm.G, sm.F])
        Dr = Delta @ r
        gn = 2.0 * Gam.T @ Delta @ Gam
        return float(r @ Dr), 2.0 * Gam.T @ Dr, gn, gn

    x0 = np.zeros(p) if start is None else model.check_theta(start)
    res = newton_minimize(objective, x0, tol=tol, max_iter=max_iter,
                          scale=lambda th: 1.0 + float(np.sqrt(max(objective(th)[0], 0.0))))
    if not res.converged:
        raise EstimationError("ME-GMM did not converge")
    return res.x


def oracle_me(model: MomentModel, data, W, gamma: Recentering, *, pilot: GmmFit | None = None) -> MEResult:
    """ME estimator with a known recentering, anchored at the pilot fit theta_hat_W."""
    gamma.check(model)
    if pilot is None:
        pilot = solve_gmm(model, data, W)
    sigma = pilot.sigma
    Gamma = np.vstack([pilot.G, pilot.F])
    var = var_me_bound(Gamma, sigma, model.is_linear)
    if model.is_linear:
        # one exact step from the pilot; anchoring there keeps degenerate (exact-fit) data on theta_hat_W
        sm = sample_means(model, data, pilot.theta)
        b1, b2 = lambda_star_linear(sm.G, sigma)
        rhs = b1 @ (sm.g - gamma.gamma1) + b2 @ (sm.G.reshape(-1) - gamma.gamma2)
        theta = pilot.theta - solve(b1 @ sm.G, rhs, name="Lambda1 G")
        return MEResult(theta, var, pilot)
    Delta = inv_spd(sigma.Sigma, name="Sigma", structural_zeros=True)
    theta = me_gmm(model, data, Delta, gamma, start=pilot.theta)
    return MEResult(theta, var, pilot)


def me_gamma(model: MomentModel, data, gamma: Recentering, W=None, *, pilot: GmmFit | None = None,
             general: bool = False):
    """theta_hat(gamma) and V_ME(W; gamma).

    The estimate minimizes the ME-GMM criterion with Delta = Sigma_hat(theta_hat_W)^-1.
    For linear models the variance is (gamma2' S11_2^-1 gamma2)^-1; otherwise (or with
    ``general=True``) the sandwich with Gamma = [gamma2; F_n] and
    Sigma_gamma = mean(psi psi') at theta_hat(gamma) minus gamma gamma'.
    """
    gamma.check(model)
    if pilot is None:
        pilot = solve_gmm(model, data, np.eye(model.m) if W is None else W)
    sigma = pilot.sigma
    Delta = inv_spd(sigma.Sigma, name="Sigma", structural_zeros=True)
    theta = me_gmm(model, data, Delta, gamma, start=pilot.theta)
    m, p = model.m, model.p
    G2 = gamma.gamma2.reshape(m, p)
    if model.is_linear and not general:
        info = G2.T @ inv_spd(sigma.S11_2, name="Sigma11_2") @ G2
        return theta, inv_spd(info, name="ME information")
    psi = model.psi_all(data, theta)
    c = gamma.vector
    Sig_g = sym(psi.T @ psi / psi.shape[0] - np.outer(c, c))
    Fn = sample_means(model, data, theta).F
    Gam = np.vstack([G2, Fn])
    bread = Gam.T @ Delta @ Gam
    binv = solve(bread, np.eye(p), name="Gamma' Delta Gamma")
    return theta, sym(binv @ Gam.T @ Delta @ Sig_g @ Delta @ Gam @ binv)


@dataclass(frozen=True)
class GammaSpace:
    """Constraint set for gamma: |g1| <= gamma1_max, gamma2_min <= |g2| <= gamma2_max,
    gamma2' W gamma1 = 0 (scalar theta)."""

    gamma1_max: float
    gamma2_min: float
    gamma2_max: float
    W: np.ndarray
    grid_resolution: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.gamma1_max < 0:
            raise ValueError("gamma1_max must be >= 0")
        if not (0 < self.gamma2_min <= self.gamma2_max):
            raise ValueError("need 0 < gamma2_min <= gamma2_max")
        if self.grid_resolution < 1:
            raise ValueError("grid_resolution must be positive")

    def gamma2_points(self, m: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, m]))
        d = rng.standard_normal((self.grid_resolution, m))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = np.linspace(self.gamma2_min, self.gamma2_max, self.grid_resolution)
        return d * r[:, None]

    def null_basis(self, gamma2: np.ndarray) -> np.ndarray:
        """Orthonormal basis of {v : gamma2' W v = 0}."""
        a = (np.asarray(self.W, dtype=float) @ gamma2)[None, :]
        _, s, vt = np.linalg.svd(a)
        rank = int(np.sum(s > 1e-12 * max(1.0, s[0]))) if s.size else 0
        return vt[rank:].T


class UnionCI(NamedTuple):
    lo: float
    hi: float
    table: list


def _detect_me_weight(model, pilot: GmmFit, W) -> bool:
    if not model.is_linear:
        return False
    target = inv_spd(pilot.sigma.S11_2, name="Sigma11_2")
    scale = np.trace(W) / np.trace(target)
    return bool(np.allclose(W, scale * target, rtol=1e-8, atol=1e-12))


def union_ci(model: MomentModel, data, space: GammaSpace, alpha: float = 0.05, *,
             grid: Sequence[Recentering] | None = None, skip_gamma1: bool | None = None,
             pilot: GmmFit | None = None) -> UnionCI:
    """Hull of the per-gamma Wald intervals over the gamma grid (scalar theta only).

    The generated grid crosses gamma2 points with gamma1 in {0, +/- gamma1_max * u},
    u the unit null-space direction of largest first-order effect on theta_hat(gamma).
    When the model is linear and W is proportional to S11_2^-1, gamma1 is skipped.
    """
    if model.p != 1:
        raise ValueError("union_ci supports scalar theta only (p = 1)")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    W = np.asarray(space.W, dtype=float)
    if pilot is None:
        pilot = solve_gmm(model, data, W)
    if skip_gamma1 is None:
        skip_gamma1 = _detect_me_weight(model, pilot, W)
    m = model.m
    if grid is None:
        grid = []
        Delta = inv_spd(pilot.sigma.Sigma, name="Sigma", structural_zeros=True)
        for g2 in space.gamma2_points(m):
            grid.append(Recentering(np.zeros(m), g2, "grid-point"))
            if skip_gamma1 or space.gamma1_max == 0:
                continue
            basis = space.null_basis(g2)
            if basis.shape[1] == 0:
                continue
            # d theta_hat / d gamma1 for the linearized criterion
            Gam = np.vstack([pilot.G, pilot.F])
            sens = (Gam.T @ Delta[:, :m]).ravel() @ basis
            u = basis @ (sens / np.linalg.norm(sens)) if np.linalg.norm(sens) > 0 else basis[:, 0]
            for sgn in (-1.0, 1.0):
                grid.append(Recentering(sgn * space.gamma1_max * u, g2, "grid-point"))
    if len(grid) == 0:
        raise ValueError("gamma grid is empty")
    z = stats.norm.ppf(1 - alpha / 2)
    n = data.n
    rows = []
    for i, gam in enumerate(grid):
        if skip_gamma1:
            gam = Recentering(np.zeros(m), gam.gamma2, gam.source)
        theta, V = me_gamma(model, data, gam, W, pilot=pilot)
        se = float(np.sqrt(max(V[0, 0], 0.0) / n))
        t = float(theta[0])
        rows.append((i, float(np.linalg.norm(gam.gamma1)), float(np.linalg.norm(gam.gamma2)),
                     t, se, t - z * se, t + z * se))
    lo = min(r[5] for r in rows)
    hi = max(r[6] for r in rows)
    return UnionCI(lo, hi, rows)


SENSITIVITY_HEADER = ("gamma_id", "gamma1_norm", "gamma2_norm", "theta", "se", "ci_lo", "ci_hi")


def write_sensitivity_csv(result: UnionCI, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SENSITIVITY_HEADER)
        for r in result.table:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])

