"""Moment models and the augmented moment vector.

A model evaluates, for each raw observation row ``x`` and parameter ``theta``:

* ``g(x, theta)``: the m moment functions,
* ``G(x, theta)``: their m x p Jacobian,
* ``F(x, theta)``: the (mp) x p derivative of ``vec(G')``.

``vec(G')`` is the row-stacking of ``G`` (row 1 first), which is exactly a
C-order reshape of an ``(m, p)`` array. Every module relies on this layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class DataSet:
    """Immutable block of raw observation rows (n x d)."""

    __slots__ = ("_rows",)

    def __init__(self, rows):
        rows = np.array(rows, dtype=float, copy=True)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-d array")
        if rows.shape[0] < 2:
            raise ValueError(f"need at least 2 observations, got {rows.shape[0]}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("rows contain missing or non-finite values")
        rows.setflags(write=False)
        self._rows = rows

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def n(self) -> int:
        return self._rows.shape[0]

    def take(self, idx) -> "DataSet":
        return DataSet(self._rows[np.asarray(idx)])

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"DataSet(n={self.n}, d={self._rows.shape[1]})"


class SampleMeans(NamedTuple):
    g: np.ndarray
    G: np.ndarray
    F: np.ndarray
    psi: np.ndarray


@dataclass(frozen=True)
class MomentModel:
    """Base class. Subclasses implement the batched ``_g``, ``_G`` and ``_F``."""

    m: int
    p: int
    is_linear: bool = field(default=False)

    def __post_init__(self):
        if not (self.m >= self.p >= 1):
            raise ValueError(f"need m >= p >= 1, got m={self.m}, p={self.p}")

    # batched evaluators over an (n, d) block of rows
    def _g(self, rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _G(self, rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _F(self, rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def k(self) -> int:
        """Length of the augmented vector, m(p+1)."""
        return self.m * (self.p + 1)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.p,):
            raise ValueError(f"theta has shape {theta.shape}, model expects ({self.p},)")
        return theta

    @staticmethod
    def _rows(data) -> np.ndarray:
        if isinstance(data, DataSet):
            return data.rows
        rows = np.asarray(data, dtype=float)
        return rows[None, :] if rows.ndim == 1 else rows

    def g_all(self, data, theta) -> np.ndarray:
        return self._g(self._rows(data), self.check_theta(theta))

    def G_all(self, data, theta) -> np.ndarray:
        return self._G(self._rows(data), self.check_theta(theta))

    def F_all(self, data, theta) -> np.ndarray:
        return self._F(self._rows(data), self.check_theta(theta))

    def psi_all(self, data, theta) -> np.ndarray:
        """Per-observation augmented vectors, shape (n, m(p+1))."""
        rows = self._rows(data)
        theta = self.check_theta(theta)
        g = self._g(rows, theta)
        G = self._G(rows, theta)
        return np.concatenate([g, G.reshape(G.shape[0], self.m * self.p)], axis=1)


def eval_g(model: MomentModel, x, theta) -> np.ndarray:
    return model.g_all(np.asarray(x, dtype=float)[None, :], theta)[0]


def eval_G(model: MomentModel, x, theta) -> np.ndarray:
    return model.G_all(np.asarray(x, dtype=float)[None, :], theta)[0]


def eval_F(model: MomentModel, x, theta) -> np.ndarray:
    return model.F_all(np.asarray(x, dtype=float)[None, :], theta)[0]


def eval_psi(model: MomentModel, x, theta) -> np.ndarray:
    return model.psi_all(np.asarray(x, dtype=float)[None, :], theta)[0]


def sample_means(model: MomentModel, data, theta) -> SampleMeans:
    rows = MomentModel._rows(data)
    if rows.shape[0] == 0:
        raise ValueError("empty dataset")
    theta = model.check_theta(theta)
    g = model._g(rows, theta).mean(axis=0)
    G = model._G(rows, theta).mean(axis=0)
    F = model._F(rows, theta).mean(axis=0)
    return SampleMeans(g, G, F, np.concatenate([g, G.reshape(-1)]))


@dataclass(frozen=True)
class LinearIV(MomentModel):
    """g(x, theta) = z (y - x'theta); row layout ``[y, x_1..x_p, z_1..z_m]``."""

    is_linear: bool = field(default=True, init=False)

    def split(self, rows: np.ndarray):
        p = self.p
        return rows[:, 0], rows[:, 1:1 + p], rows[:, 1 + p:1 + p + self.m]

    def _g(self, rows, theta):
        y, X, Z = self.split(rows)
        return Z * (y - X @ theta)[:, None]

    def _G(self, rows, theta):
        _, X, Z = self.split(rows)
        return -Z[:, :, None] * X[:, None, :]

    def _F(self, rows, theta):
        return np.zeros((rows.shape[0], self.m * self.p, self.p))

    def dataset(self, y, X, Z) -> DataSet:
        return DataSet(pack_rows(y, X, Z))


@dataclass(frozen=True)
class ExponentialIV(MomentModel):
    """Count-data IV moments g(x, theta) = z (y - exp(x'theta)); same row layout."""

    split = LinearIV.split

    def _g(self, rows, theta):
        y, X, Z = self.split(rows)
        return Z * (y - np.exp(X @ theta))[:, None]

    def _G(self, rows, theta):
        _, X, Z = self.split(rows)
        e = np.exp(X @ theta)
        return -(Z * e[:, None])[:, :, None] * X[:, None, :]

    def _F(self, rows, theta):
        _, X, Z = self.split(rows)
        e = np.exp(X @ theta)
        n, m, p = rows.shape[0], self.m, self.p
        # d G[j,k] / d theta_l = -z_j x_k x_l exp(x'theta)
        out = -(Z * e[:, None])[:, :, None, None] * X[:, None, :, None] * X[:, None, None, :]
        return out.reshape(n, m * p, p)

    def dataset(self, y, X, Z) -> DataSet:
        return DataSet(pack_rows(y, X, Z))


def pack_rows(y, X, Z) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    X = X.reshape(len(y), -1)
    Z = Z.reshape(len(y), -1)
    return np.hstack([y, X, Z])


def fd_step(theta: np.ndarray) -> np.ndarray:
    return 1e-5 * (1.0 + np.abs(theta))


def fd_G(model: MomentModel, x, theta) -> np.ndarray:
    """Central finite differences of ``eval_g``; the derivative oracle."""
    theta = model.check_theta(theta)
    h = fd_step(theta)
    cols = []
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = h[j]
        cols.append((eval_g(model, x, theta + e) - eval_g(model, x, theta - e)) / (2 * h[j]))
    return np.column_stack(cols)


def fd_F(model: MomentModel, x, theta) -> np.ndarray:
    theta = model.check_theta(theta)
    h = fd_step(theta)
    cols = []
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = h[j]
        up = eval_G(model, x, theta + e).reshape(-1)
        dn = eval_G(model, x, theta - e).reshape(-1)
        cols.append((up - dn) / (2 * h[j]))
    return np.column_stack(cols)
