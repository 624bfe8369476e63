"""One-step GMM: weight matrices, the criterion minimizer and the J-test."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ._linalg import COND_CAP, cond, inv_spd, is_spd, solve, sym
from ._solver import ConvergenceError, multistart, newton_minimize
from .covariance import (
    SigmaParts,
    a_matrices,
    sigma_hat,
    standard_errors,
    var_conventional,
    var_me_bound,
    var_misspec_robust,
)
from .model import MomentModel, sample_means


class EstimationError(RuntimeError):
    """Numerical failure: rank deficiency, singular design, non-convergence."""


WEIGHT_KINDS = ("identity", "zz", "s11", "s112", "fixed")


@dataclass(frozen=True)
class WeightSpec:
    kind: str = "identity"
    matrix: np.ndarray | None = field(default=None, compare=False, repr=False)
    preliminary: "WeightSpec | None" = None

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight kind {self.kind!r}; expected one of {WEIGHT_KINDS}")
        if self.kind == "fixed":
            if self.matrix is None:
                raise ValueError("fixed weight needs a matrix")
            if not is_spd(np.asarray(self.matrix, dtype=float)):
                raise ValueError("fixed weight matrix must be symmetric positive definite")

    @property
    def data_dependent(self) -> bool:
        return self.kind in ("zz", "s11", "s112")

    @property
    def pilot(self) -> "WeightSpec":
        return self.preliminary or WeightSpec("identity")

    @classmethod
    def parse(cls, text: str) -> "WeightSpec":
        """Parse ``identity|zz|s11|s112|fixed:<path>`` (``I`` is accepted for identity)."""
        text = text.strip()
        low = text.lower()
        if low in ("i", "identity"):
            return cls("identity")
        if low.startswith("fixed:"):
            path = Path(text.split(":", 1)[1])
            return cls("fixed", np.loadtxt(path, delimiter=",", ndmin=2))
        return cls(low)

    def label(self) -> str:
        return {"identity": "I", "zz": "(Z'Z/n)^-1", "s11": "S11^-1", "s112": "S11.2^-1",
                "fixed": "fixed"}[self.kind]


@dataclass(frozen=True)
class GmmFit:
    theta: np.ndarray
    W: np.ndarray
    g: np.ndarray
    G: np.ndarray
    F: np.ndarray
    J: float
    J_pvalue: float
    sigma: SigmaParts
    var_conventional: np.ndarray
    var_robust: np.ndarray
    var_me_bound: np.ndarray
    n: int
    converged: bool = True
    iterations: int = 0

    @property
    def m(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]

    @property
    def foc(self) -> np.ndarray:
        return self.G.T @ self.W @ self.g

    def se(self, which: str = "robust") -> np.ndarray:
        V = {"conventional": self.var_conventional, "robust": self.var_robust,
             "me": self.var_me_bound}[which]
        return standard_errors(V, self.n)


def instrument_gram(model: MomentModel, data) -> np.ndarray:
    if not hasattr(model, "split") or not model.is_linear:
        raise ValueError("InstrumentGram weight requires a linear IV model")
    _, _, Z = model.split(data.rows)
    return Z.T @ Z / Z.shape[0]


def build_weight(spec: WeightSpec, model: MomentModel, data):
    """Resolve a weight spec on a sample; returns ``(W, pilot_fit_or_None)``."""
    m = model.m
    if spec.kind == "identity":
        return np.eye(m), None
    if spec.kind == "fixed":
        W = np.asarray(spec.matrix, dtype=float)
        if W.shape != (m, m):
            raise ValueError(f"fixed weight has shape {W.shape}, expected ({m}, {m})")
        return sym(W), None
    if spec.kind == "zz":
        Q = instrument_gram(model, data)
        if cond(Q) > COND_CAP:
            raise EstimationError("instrument Gram matrix is singular")
        return inv_spd(Q, name="Z'Z/n"), None
    W0, _ = build_weight(spec.pilot, model, data)
    pilot = solve_gmm(model, data, W0)
    block = pilot.sigma.S11 if spec.kind == "s11" else pilot.sigma.S11_2
    return inv_spd(block, name="weight block"), pilot


def j_test(fit: GmmFit, n: int | None = None) -> tuple[float, float]:
    """J = n g_n' W g_n and its chi-square(m - p) upper-tail p-value."""
    if fit.m == fit.p:
        raise ValueError("just-identified: J-test undefined")
    n = fit.n if n is None else n
    J = float(n * fit.g @ fit.W @ fit.g)
    return J, float(stats.chi2.sf(J, fit.m - fit.p))


def _gmm_objective(model, data, W):
    def objective(theta):
        sm = sample_means(model, data, theta)
        Wg = W @ sm.g
        val = float(sm.g @ Wg)
        grad = 2.0 * sm.G.T @ Wg
        gn = 2.0 * sm.G.T @ W @ sm.G
        curv = 2.0 * np.kron(Wg[None, :], np.eye(model.p)) @ sm.F
        return val, grad, gn + curv, gn

    return objective


def fit_from_theta(model: MomentModel, data, W, theta, *, converged=True, iterations=0) -> GmmFit:
    """Assemble a GmmFit (moments, J, Sigma, three variances) at a given theta."""
    theta = model.check_theta(theta)
    sm = sample_means(model, data, theta)
    sigma = sigma_hat(model, data, theta)
    n = data.n
    a = a_matrices(sm.G, sm.g, sm.F, W)
    J = float(n * sm.g @ W @ sm.g)
    pval = float(stats.chi2.sf(J, model.m - model.p)) if model.m > model.p else float("nan")
    return GmmFit(
        theta=theta, W=W, g=sm.g, G=sm.G, F=sm.F, J=J, J_pvalue=pval, sigma=sigma,
        var_conventional=var_conventional(sm.G, W, sigma.S11),
        var_robust=var_misspec_robust(a, sigma),
        var_me_bound=var_me_bound(a.Gamma, sigma, model.is_linear),
        n=n, converged=converged, iterations=iterations,
    )


def linear_gmm_theta(g0, G, W) -> np.ndarray:
    """Closed form for linear moments g_n(theta) = g0 + G theta."""
    if G.shape[0] == G.shape[1] and cond(G) < COND_CAP:
        # just-identified: g_n(theta) = 0 has an exact root whatever W is
        return -np.linalg.solve(G, g0)
    bread = G.T @ W @ G
    if np.linalg.matrix_rank(bread) < G.shape[1]:
        raise EstimationError("rank-deficient G'WG (X'Z W Z'X)")
    return -solve(bread, G.T @ W @ g0, name="G'WG")


def solve_gmm(
    model: MomentModel,
    data,
    W,
    *,
    start=None,
    box=None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> GmmFit:
    """argmin_theta g_n(theta)' W g_n(theta).

    Linear models use the closed form. Otherwise Newton with Armijo backtracking
    from ``start`` (default zeros), then a 9-point-per-axis multistart over
    ``box`` (default start +/- 5) if that fails.
    """
    W = sym(np.asarray(W, dtype=float))
    p = model.p
    if model.is_linear:
        zero = np.zeros(p)
        sm = sample_means(model, data, zero)
        theta = linear_gmm_theta(sm.g, sm.G, W)
        return fit_from_theta(model, data, W, theta)
    x0 = np.zeros(p) if start is None else model.check_theta(start)
    obj = _gmm_objective(model, data, W)

    def scale(theta):
        return 1.0 + float(np.linalg.norm(sample_means(model, data, theta).g))

    res = newton_minimize(obj, x0, tol=tol, max_iter=max_iter, scale=scale)
    if not res.converged:
        if box is None:
            box = (x0 - 5.0, x0 + 5.0)
        try:
            res = multistart(obj, box, tol=tol, max_iter=max_iter, scale=scale)
        except ConvergenceError as exc:
            raise EstimationError(f"GMM did not converge: {exc}") from exc
    return fit_from_theta(model, data, W, res.x, converged=True, iterations=res.iterations)


def fit_gmm(model: MomentModel, data, spec: WeightSpec | str = "identity", **kw) -> GmmFit:
    """Resolve ``spec`` on ``data`` and solve; the usual entry point."""
    if isinstance(spec, str):
        spec = WeightSpec.parse(spec)
    W, pilot = build_weight(spec, model, data)
    if pilot is not None and not model.is_linear and "start" not in kw:
        kw["start"] = pilot.theta
    return solve_gmm(model, data, W, **kw)
