"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``MEGMM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("MEGMM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def _prepare(psi, idx):
    psi = np.ascontiguousarray(psi, dtype=np.float64)
    idx = np.ascontiguousarray(np.atleast_2d(idx), dtype=np.int64)
    if psi.ndim != 2:
        raise ValueError("psi must be 2-d (n, k)")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= psi.shape[0]:
        raise ValueError("resample indices out of range")
    return psi, idx


def resampled_means(psi, idx, impl=None):
    """Row means of ``psi[idx[b]]`` for every replicate b, shape (B, k)."""
    impl = impl or _impl
    return impl.resampled_means(*_prepare(psi, idx))


# Above this many psi columns the BLAS-backed fallback beats the compiled
# triangle loop for resampled covariances (see benchmarks/bench_kernels.py).
COV_COMPILED_MAX_K = 2


def resampled_cov(psi, idx, impl=None):
    """Means (B, k) and divisor-n centered covariances (B, k, k) per replicate."""
    psi, idx = _prepare(psi, idx)
    if impl is None:
        impl = _impl if psi.shape[1] <= COV_COMPILED_MAX_K else _kernels_py
    return impl.resampled_cov(psi, idx)


def centered_cov(psi, impl=None):
    impl = impl or _impl
    return impl.centered_cov(np.ascontiguousarray(psi, dtype=np.float64))
