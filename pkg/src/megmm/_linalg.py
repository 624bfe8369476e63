"""Guarded dense linear algebra shared by the estimators."""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla

COND_CAP = 1e12


class SingularMatrixWarning(RuntimeWarning):
    pass


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def cond(a: np.ndarray) -> float:
    if a.size == 0:
        return 1.0
    s = np.linalg.svd(a, compute_uv=False)
    if s[-1] <= 0.0:
        return np.inf
    return float(s[0] / s[-1])


def inv_spd(a: np.ndarray, *, name: str = "matrix", cap: float = COND_CAP,
            structural_zeros: bool = False) -> np.ndarray:
    """Invert a symmetric PSD matrix.

    Uses Cholesky when the condition number is below ``cap`` and falls back to
    the Moore-Penrose pseudo-inverse (with a warning) otherwise. With
    ``structural_zeros``, rows that are exactly zero (entries with no sampling
    variation, e.g. the Jacobian of an intercept on an intercept) are dropped
    before inverting and come back as zeros, which is the pseudo-inverse
    without the warning.
    """
    a = sym(np.atleast_2d(np.asarray(a, dtype=float)))
    if structural_zeros:
        live = np.any(a != 0.0, axis=1)
        if not np.all(live):
            out = np.zeros_like(a)
            if np.any(live):
                out[np.ix_(live, live)] = inv_spd(a[np.ix_(live, live)], name=name, cap=cap)
            return out
    if cond(a) < cap:
        try:
            c = sla.cho_factor(a, lower=True, check_finite=False)
            return sym(sla.cho_solve(c, np.eye(a.shape[0]), check_finite=False))
        except np.linalg.LinAlgError:
            pass
    warnings.warn(f"{name} is ill-conditioned; using pseudo-inverse", SingularMatrixWarning, stacklevel=2)
    return sym(np.linalg.pinv(a, hermitian=True))


def solve(a: np.ndarray, b: np.ndarray, *, name: str = "matrix", cap: float = COND_CAP) -> np.ndarray:
    """Solve a general square system, pseudo-inverse beyond the condition cap."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if cond(a) < cap:
        return np.linalg.solve(a, b)
    warnings.warn(f"{name} is ill-conditioned; using pseudo-inverse", SingularMatrixWarning, stacklevel=2)
    return np.linalg.pinv(a) @ b


def is_spd(a: np.ndarray, floor: float = 1e-12) -> bool:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        return False
    ev = np.linalg.eigvalsh(sym(a))
    return bool(ev[0] > floor * max(1.0, abs(ev[-1])))


def min_eig(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(np.asarray(a, dtype=float)))[0])
