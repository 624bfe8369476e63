"""Centered covariance of the augmented moments and the variance formulas built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from ._linalg import inv_spd, solve, sym
from .model import MomentModel


@dataclass(frozen=True)
class SigmaParts:
    Sigma: np.ndarray
    S11: np.ndarray
    S12: np.ndarray
    S22: np.ndarray
    S11_2: np.ndarray
    S22_1: np.ndarray
    theta_at: np.ndarray
    m: int
    p: int

    @property
    def S21(self) -> np.ndarray:
        return self.S12.T

    @classmethod
    def from_sigma(cls, Sigma, m: int, p: int, theta_at=None) -> "SigmaParts":
        Sigma = sym(np.asarray(Sigma, dtype=float))
        S11, S12, S22 = Sigma[:m, :m], Sigma[:m, m:], Sigma[m:, m:]
        S11_2 = sym(S11 - S12 @ inv_spd(S22, name="Sigma22", structural_zeros=True) @ S12.T)
        S22_1 = sym(S22 - S12.T @ inv_spd(S11, name="Sigma11") @ S12)
        theta_at = np.full(p, np.nan) if theta_at is None else np.asarray(theta_at, dtype=float)
        return cls(Sigma, S11, S12, S22, S11_2, S22_1, theta_at, m, p)


class AMatrices(NamedTuple):
    A: np.ndarray
    Gamma: np.ndarray
    H: np.ndarray


def sigma_hat(model: MomentModel, data, theta) -> SigmaParts:
    """Centered sample covariance of psi(X_i, theta), sliced into blocks."""
    theta = model.check_theta(theta)
    psi = model.psi_all(data, theta)
    if psi.shape[0] < 2:
        raise ValueError("sigma_hat needs at least 2 observations")
    _, cov = kernels.centered_cov(psi)
    return SigmaParts.from_sigma(cov, model.m, model.p, theta)


def a_matrices(G, g, F, W) -> AMatrices:
    """A = [G'W, g'W (x) I_p], Gamma = [G; F], H = A Gamma."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    m, p = G.shape
    g = np.asarray(g, dtype=float).reshape(m)
    F = np.asarray(F, dtype=float).reshape(m * p, p)
    A = np.hstack([G.T @ W, np.kron((g @ W)[None, :], np.eye(p))])
    Gamma = np.vstack([G, F])
    return AMatrices(A, Gamma, A @ Gamma)


def sandwich(bread: np.ndarray, meat: np.ndarray, name: str = "bread") -> np.ndarray:
    binv = solve(bread, np.eye(bread.shape[0]), name=name)
    return sym(binv @ meat @ binv.T)


def var_conventional(G, W, S11) -> np.ndarray:
    G = np.atleast_2d(G)
    return sandwich(G.T @ W @ G, G.T @ W @ S11 @ W @ G, name="G'WG")


def var_misspec_robust(a: AMatrices, sigma: SigmaParts) -> np.ndarray:
    return sandwich(a.H, a.A @ sigma.Sigma @ a.A.T, name="A Gamma")


def var_m_of_lambda(Lam, Gamma, Sigma) -> np.ndarray:
    Sigma = Sigma.Sigma if isinstance(Sigma, SigmaParts) else Sigma
    return sandwich(Lam @ Gamma, Lam @ Sigma @ Lam.T, name="Lambda Gamma")


def var_me_bound(Gamma, sigma: SigmaParts, is_linear: bool, *, general: bool = False) -> np.ndarray:
    """ME efficiency bound.

    The linear path is (G' S11_2^-1 G)^-1; the general path is (Gamma' Sigma^-1 Gamma)^-1.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    if Gamma.ndim != 2 or np.linalg.matrix_rank(Gamma) < Gamma.shape[1]:
        raise ValueError("Gamma must have full column rank")
    if is_linear and not general:
        G = Gamma[: sigma.m]
        info = G.T @ inv_spd(sigma.S11_2, name="Sigma11_2") @ G
    else:
        info = Gamma.T @ inv_spd(sigma.Sigma, name="Sigma", structural_zeros=True) @ Gamma
    return inv_spd(info, name="ME information")


def var_me_decomposed(Gamma, sigma: SigmaParts) -> np.ndarray:
    """(G'S11^-1 G + F_G' S22_1^-1 F_G)^-1 with F_G = F - S21 S11^-1 G."""
    m = sigma.m
    G, F = Gamma[:m], Gamma[m:]
    S11inv = inv_spd(sigma.S11, name="Sigma11")
    FG = F - sigma.S21 @ S11inv @ G
    info = G.T @ S11inv @ G + FG.T @ inv_spd(sigma.S22_1, name="Sigma22_1") @ FG
    return inv_spd(info, name="ME information")


class UniformBound(NamedTuple):
    sup: np.ndarray
    argmax: list
    index: np.ndarray


def uniform_me_bound(fits: Sequence[tuple]) -> UniformBound:
    """Per-coordinate worst case of diag V_ME(W) over a finite set of (W, V_ME) pairs."""
    if len(fits) == 0:
        raise ValueError("candidate set is empty")
    diags = np.array([np.diag(np.atleast_2d(v)) for _, v in fits])
    idx = np.argmax(diags, axis=0)
    return UniformBound(diags[idx, np.arange(diags.shape[1])], [fits[i][0] for i in idx], idx)


def standard_errors(V, n: int) -> np.ndarray:
    """Reported SEs: sqrt(diag(V) / n)."""
    return np.sqrt(np.clip(np.diag(np.atleast_2d(V)), 0.0, None) / n)
