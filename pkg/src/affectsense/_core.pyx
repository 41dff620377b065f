# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the inner loops of change-point search and particle weighting."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fmax, fabs

cnp.import_array()


def pelt_sse(const double[::1] x, double beta):
    """PELT over a squared-error cost; returns ``last[t]`` = start of the final segment of ``x[:t]``."""
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s1_arr = np.zeros(n + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s2_arr = np.zeros(n + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] f_arr = np.empty(n + 1)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] last_arr = np.zeros(n + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cand_arr = np.empty(n + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] val_arr = np.empty(n + 1)
    cdef double[::1] s1 = s1_arr
    cdef double[::1] s2 = s2_arr
    cdef double[::1] f = f_arr
    cdef long long[::1] last = last_arr
    cdef long long[::1] cand = cand_arr
    cdef double[::1] val = val_arr
    cdef Py_ssize_t i, t, k, m, kept
    cdef long long s, best_s
    cdef double d, cost, v, best, tol

    for i in range(n):
        s1[i + 1] = s1[i] + x[i]
        s2[i + 1] = s2[i] + x[i] * x[i]

    f[0] = -beta
    cand[0] = 0
    m = 1
    for t in range(1, n + 1):
        best = 0.0
        best_s = -1
        for k in range(m):
            s = cand[k]
            d = s1[t] - s1[s]
            cost = fmax(0.0, (s2[t] - s2[s]) - d * d / <double>(t - s))
            v = f[s] + cost
            val[k] = v
            if best_s < 0 or v < best:
                best = v
                best_s = s
        best = best + beta
        f[t] = best
        last[t] = best_s
        tol = 1e-10 * (1.0 + fabs(best))
        kept = 0
        for k in range(m):
            if val[k] <= best + tol:
                cand[kept] = cand[k]
                kept += 1
        cand[kept] = t
        m = kept + 1
    return last_arr


def range_loglik(const double[:, ::1] particles, const double[:, ::1] anchors,
                 const double[::1] dists, const double[::1] sigmas):
    """Gaussian range log-likelihood per particle (up to a constant)."""
    cdef Py_ssize_t n = particles.shape[0]
    cdef Py_ssize_t m = anchors.shape[0]
    cdef Py_ssize_t dim = particles.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, c
    cdef double acc, r, diff, sq
    for i in range(n):
        acc = 0.0
        for j in range(m):
            sq = 0.0
            for c in range(dim):
                diff = particles[i, c] - anchors[j, c]
                sq = sq + diff * diff
            r = (sqrt(sq) - dists[j]) / sigmas[j]
            acc = acc + r * r
        out[i] = -0.5 * acc
    return out_arr


def systematic_resample(const double[::1] weights, double u0):
    """Indices drawn by systematic resampling with offset ``u0`` in [0, 1)."""
    cdef Py_ssize_t n = weights.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] idx = idx_arr
    cdef Py_ssize_t i = 0, j = 0
    cdef double cum = weights[0]
    cdef double pos
    while i < n:
        pos = (i + u0) / <double>n
        if pos < cum or j == n - 1:
            idx[i] = j
            i += 1
        else:
            j += 1
            cum = cum + weights[j]
    return idx_arr
