"""Damped Newton iterations used by the nonlinear estimators."""

from __future__ import annotations

import itertools
from typing import Callable, NamedTuple

import numpy as np


class SolverResult(NamedTuple):
    x: np.ndarray
    value: float
    foc: float
    converged: bool
    iterations: int


class ConvergenceError(RuntimeError):
    pass


def _quiet(fn):
    # trial points far out along a line search may overflow; they are rejected as non-finite
    def wrapped(x):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(x)

    return wrapped


def _step(grad, hess, fallback):
    for H in (hess, fallback):
        if H is None:
            continue
        try:
            ev = np.linalg.eigvalsh(0.5 * (H + H.T))
        except np.linalg.LinAlgError:
            continue
        if ev[0] > 1e-14 * max(1.0, abs(ev[-1])):
            return -np.linalg.solve(H, grad)
    return -grad


def newton_minimize(
    objective: Callable[[np.ndarray], tuple],
    x0,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    scale: Callable[[np.ndarray], float] | None = None,
) -> SolverResult:
    """Minimize a smooth objective with Armijo-backtracked Newton steps.

    ``objective(x)`` returns ``(value, grad, hess, gauss_newton_hess)``; the
    Gauss-Newton matrix is used when the exact Hessian is not positive definite.
    Convergence: ``max|grad| <= tol * scale(x)`` (scale defaults to 1).
    """
    x = np.array(x0, dtype=float)
    objective = _quiet(objective)
    f, g, H, Hgn = objective(x)
    for it in range(max_iter + 1):
        s = 1.0 if scale is None else scale(x)
        foc = float(np.max(np.abs(g)))
        if not np.isfinite(f):
            return SolverResult(x, f, foc, False, it)
        if foc <= tol * s:
            return SolverResult(x, f, foc, True, it)
        if it == max_iter:
            break
        d = _step(g, H, Hgn)
        slope = float(g @ d)
        if slope >= 0:
            d, slope = -g, -float(g @ g)
        t = 1.0
        for _ in range(60):
            xn = x + t * d
            fn, gn, Hn, Hgnn = objective(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no decrease representable at this precision; accept if already flat
            return SolverResult(x, f, foc, foc <= 1e3 * tol * s, it)
        stalled = np.max(np.abs(xn - x)) <= 1e-14 * (1.0 + np.max(np.abs(x)))
        x, f, g, H, Hgn = xn, fn, gn, Hn, Hgnn
        if stalled:
            foc = float(np.max(np.abs(g)))
            return SolverResult(x, f, foc, foc <= 1e3 * tol * s, it + 1)
    return SolverResult(x, f, float(np.max(np.abs(g))), False, max_iter)


def newton_root(
    system: Callable[[np.ndarray], tuple],
    x0,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> SolverResult:
    """Solve r(x) = 0 (square system) by Newton with backtracking on |r|^2.

    ``system(x)`` returns ``(r, J)``.
    """
    x = np.array(x0, dtype=float)
    system = _quiet(system)
    r, J = system(x)
    for it in range(max_iter + 1):
        nr = float(np.max(np.abs(r)))
        if not np.all(np.isfinite(r)):
            return SolverResult(x, np.inf, np.inf, False, it)
        if nr <= tol:
            return SolverResult(x, 0.5 * float(r @ r), nr, True, it)
        if it == max_iter:
            break
        try:
            d = -np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            d = -np.linalg.lstsq(J, r, rcond=None)[0]
        f0 = float(r @ r)
        t = 1.0
        for _ in range(60):
            rn, Jn = system(x + t * d)
            if np.all(np.isfinite(rn)) and float(rn @ rn) <= (1 - 1e-4 * t) * f0:
                break
            t *= 0.5
        else:
            return SolverResult(x, 0.5 * f0, nr, False, it)
        stalled = np.max(np.abs(t * d)) <= 1e-14 * (1.0 + np.max(np.abs(x)))
        x, r, J = x + t * d, rn, Jn
        if stalled:
            nr = float(np.max(np.abs(r)))
            return SolverResult(x, 0.5 * float(r @ r), nr, nr <= 1e3 * tol, it + 1)
    return SolverResult(x, 0.5 * float(r @ r), float(np.max(np.abs(r))), False, max_iter)


def multistart(
    objective: Callable[[np.ndarray], tuple],
    box: tuple[np.ndarray, np.ndarray],
    *,
    points: int = 9,
    **kw,
) -> SolverResult:
    """Run ``newton_minimize`` from every node of a ``points``-per-axis grid.

    Picks the converged run with the lowest value; ties go to the
    lexicographically smallest x.
    """
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
    axes = [np.linspace(a, b, points) for a, b in zip(lo, hi)]
    best = None
    for node in itertools.product(*axes):
        res = newton_minimize(objective, np.array(node), **kw)
        if not res.converged:
            continue
        key = (round(res.value, 12), tuple(np.round(res.x, 10)))
        if best is None or key < best[0]:
            best = (key, res)
    if best is None:
        raise ConvergenceError("no multistart node converged")
    return best[1]
