"""Pure-numpy versions of the compiled kernels (same signatures and layouts)."""

from __future__ import annotations

import numpy as np


def _counts(idx: np.ndarray, n: int) -> np.ndarray:
    B = idx.shape[0]
    flat = (idx + n * np.arange(B)[:, None]).ravel()
    return np.bincount(flat, minlength=B * n).reshape(B, n).astype(float)


def resampled_means(psi: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n = idx.shape[1]
    return _counts(idx, psi.shape[0]) @ psi / n


def resampled_cov(psi: np.ndarray, idx: np.ndarray):
    n = idx.shape[1]
    c = _counts(idx, psi.shape[0])
    # centre at the full-sample mean so replicate means stay near zero and the
    # second-moment subtraction does not cancel
    centre = psi.mean(axis=0)
    d = psi - centre
    dm = c @ d / n
    second = np.einsum("bi,ij,il->bjl", c, d, d, optimize=True) / n
    covs = second - dm[:, :, None] * dm[:, None, :]
    means = centre + dm
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    return means, covs


def centered_cov(psi: np.ndarray):
    shifted = psi - psi[0]
    dm = shifted.mean(axis=0)
    d = shifted - dm
    cov = d.T @ d / psi.shape[0]
    return psi[0] + dm, 0.5 * (cov + cov.T)
