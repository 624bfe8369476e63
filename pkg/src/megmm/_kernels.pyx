# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bootstrap kernels: resampled means and centered covariances of psi."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def resampled_means(const double[:, ::1] psi, const cnp.int64_t[:, ::1] idx):
    cdef Py_ssize_t B = idx.shape[0], n = idx.shape[1], k = psi.shape[1]
    cdef Py_ssize_t b, i, j, r
    out_arr = np.zeros((B, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double inv_n = 1.0 / n
    for b in range(B):
        for i in range(n):
            r = idx[b, i]
            for j in range(k):
                out[b, j] += psi[r, j]
        for j in range(k):
            out[b, j] *= inv_n
    return out_arr


def resampled_cov(const double[:, ::1] psi, const cnp.int64_t[:, ::1] idx):
    """Means (B, k) and centered covariances (B, k, k) of psi over each index row.

    Draws are first collapsed to per-row counts, so each distinct row is
    visited once. Accumulation is shifted by the replicate's first draw so
    the second-moment subtraction does not cancel catastrophically.
    """
    cdef Py_ssize_t B = idx.shape[0], n = idx.shape[1], k = psi.shape[1], N = psi.shape[0]
    cdef Py_ssize_t b, i, j, l, r, r0, t, u, nu
    means_arr = np.empty((B, k), dtype=np.float64)
    cdef double[:, ::1] means = means_arr
    covs_arr = np.empty((B, k, k), dtype=np.float64)
    cdef double[:, :, ::1] covs = covs_arr
    cdef cnp.int64_t[::1] cnt = np.zeros(N, dtype=np.int64)
    cdef cnp.int64_t[::1] rows = np.empty(n, dtype=np.int64)
    cdef double[::1] d = np.empty(k, dtype=np.float64)
    cdef double[::1] s1 = np.empty(k, dtype=np.float64)
    cdef double[::1] s2 = np.empty(k * (k + 1) // 2, dtype=np.float64)
    cdef double inv_n = 1.0 / n
    cdef double w, wdj, c
    cdef const double* p0
    cdef const double* pr
    cdef double* dp = &d[0]
    cdef double* a1 = &s1[0]
    cdef double* a2 = &s2[0]
    for b in range(B):
        r0 = idx[b, 0]
        nu = 0
        for i in range(n):
            r = idx[b, i]
            if cnt[r] == 0:
                rows[nu] = r
                nu += 1
            cnt[r] += 1
        s1[:] = 0.0
        s2[:] = 0.0
        p0 = &psi[r0, 0]
        for u in range(nu):
            r = rows[u]
            w = <double>cnt[r]
            cnt[r] = 0
            pr = &psi[r, 0]
            for j in range(k):
                dp[j] = pr[j] - p0[j]
                a1[j] += w * dp[j]
            t = 0
            for j in range(k):
                wdj = w * dp[j]
                for l in range(j, k):
                    a2[t] += wdj * dp[l]
                    t += 1
        t = 0
        for j in range(k):
            s1[j] *= inv_n
            means[b, j] = psi[r0, j] + s1[j]
        for j in range(k):
            for l in range(j, k):
                c = s2[t] * inv_n - s1[j] * s1[l]
                covs[b, j, l] = c
                covs[b, l, j] = c
                t += 1
    return means_arr, covs_arr


def centered_cov(const double[:, ::1] psi):
    """Two-pass centered covariance (divisor n) of the rows of psi, shifted by row 0."""
    cdef Py_ssize_t n = psi.shape[0], k = psi.shape[1]
    cdef Py_ssize_t i, j, l
    mean_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] mean = mean_arr
    cov_arr = np.zeros((k, k), dtype=np.float64)
    cdef double[:, ::1] cov = cov_arr
    cdef double[::1] d = np.empty(k, dtype=np.float64)
    cdef double[::1] dm = np.zeros(k, dtype=np.float64)
    for i in range(n):
        for j in range(k):
            dm[j] += psi[i, j] - psi[0, j]
    for j in range(k):
        dm[j] /= n
    for i in range(n):
        for j in range(k):
            d[j] = (psi[i, j] - psi[0, j]) - dm[j]
        for j in range(k):
            for l in range(j, k):
                cov[j, l] += d[j] * d[l]
    for j in range(k):
        mean[j] = psi[0, j] + dm[j]
        for l in range(j, k):
            cov[j, l] /= n
            cov[l, j] = cov[j, l]
    return mean_arr, cov_arr
