import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from megmm import _kernels_py, kernels

compiled = pytest.importorskip("megmm._kernels") if kernels.BACKEND == "cython" else None
IMPLS = [_kernels_py] + ([compiled] if compiled is not None else [])


def naive(psi, idx):
    means = np.array([psi[r].mean(axis=0) for r in idx])
    covs = np.array([np.cov(psi[r].T, bias=True).reshape(psi.shape[1], psi.shape[1]) for r in idx])
    return means, covs


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__)
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40), st.integers(1, 6), st.integers(1, 8))
def test_resampled_against_naive(impl, seed, n, k, B):
    r = np.random.default_rng(seed)
    psi = r.standard_normal((n, k))
    idx = r.integers(0, n, (B, n))
    m, c = kernels.resampled_cov(psi, idx, impl=impl)
    m0, c0 = naive(psi, idx)
    np.testing.assert_allclose(m, m0, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(c, c0, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(kernels.resampled_means(psi, idx, impl=impl), m0, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__)
def test_centered_cov_exact_on_constants(impl):
    psi = np.tile([0.1, 0.7, -3.3], (9, 1))
    mean, cov = kernels.centered_cov(psi, impl=impl)
    assert np.array_equal(mean, psi[0]) and not np.any(cov)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__)
def test_centered_cov_large_offset(impl):
    # shifted two-pass keeps precision when the mean dwarfs the spread
    r = np.random.default_rng(5)
    psi = 1e8 + r.standard_normal((1000, 2))
    _, cov = kernels.centered_cov(psi, impl=impl)
    np.testing.assert_allclose(cov, np.cov((psi - 1e8).T, bias=True), rtol=1e-7)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__)
def test_resampled_cov_large_offset(impl):
    r = np.random.default_rng(6)
    psi = 1e6 + r.standard_normal((500, 4))
    idx = r.integers(0, 500, (30, 500))
    _, c = kernels.resampled_cov(psi, idx, impl=impl)
    np.testing.assert_allclose(c, naive(psi - 1e6, idx)[1], rtol=0, atol=1e-10)


def test_default_dispatch_matches_both():
    r = np.random.default_rng(2)
    for k in (1, 2, 3, 6):
        psi = r.standard_normal((50, k))
        idx = r.integers(0, 50, (5, 50))
        np.testing.assert_allclose(kernels.resampled_cov(psi, idx)[1], naive(psi, idx)[1], atol=1e-12)


def test_backends_agree():
    if compiled is None:
        pytest.skip("compiled kernels not built")
    r = np.random.default_rng(1)
    psi = r.standard_normal((300, 4))
    idx = r.integers(0, 300, (20, 300))
    a = kernels.resampled_cov(psi, idx, impl=compiled)
    b = kernels.resampled_cov(psi, idx, impl=_kernels_py)
    np.testing.assert_allclose(a[0], b[0], atol=1e-14)
    np.testing.assert_allclose(a[1], b[1], atol=1e-13)


def test_index_validation():
    psi = np.zeros((4, 2))
    with pytest.raises(ValueError):
        kernels.resampled_means(psi, np.array([[0, 1, 2, 4]]))
    with pytest.raises(ValueError):
        kernels.resampled_means(psi, np.array([[-1, 0, 0, 0]]))


def test_pure_python_switch():
    env = dict(os.environ, MEGMM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import megmm; print(megmm.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
