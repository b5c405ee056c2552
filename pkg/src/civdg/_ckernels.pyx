# cython: language_level=3
"""Compiled twins of the kernels in ``_pykernels``.

The affine kernels share the numpy/BLAS path.  The remaining loops run in a
fixed order, so results are reproducible run to run, but they are not
guaranteed to match the numpy versions bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND = "cython"


def affine_forward(x, W, b):
    # dense products go to BLAS, which hand-written loops do not beat at these sizes
    if W.shape[1] != x.shape[1] or b.shape[0] != W.shape[0]:
        raise ValueError("affine_forward: shape mismatch")
    return x @ W.T + b


def affine_backward(dout, x, W):
    return dout @ W, dout.T @ x, dout.sum(axis=0)


def leaky_relu(const double[:, ::1] x, double slope):
    cdef Py_ssize_t B = x.shape[0], n = x.shape[1], i, k
    cdef double v
    out = np.empty((B, n))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(B):
            for k in range(n):
                v = x[i, k]
                o[i, k] = v if v > 0.0 else slope * v
    return out


def leaky_relu_backward(const double[:, ::1] dout, const double[:, ::1] x, double slope):
    cdef Py_ssize_t B = x.shape[0], n = x.shape[1], i, k
    out = np.empty((B, n))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(B):
            for k in range(n):
                o[i, k] = dout[i, k] if x[i, k] > 0.0 else slope * dout[i, k]
    return out


def moment_matrix(const double[:, ::1] e, const double[:, ::1] c):
    cdef Py_ssize_t B = e.shape[0], C = e.shape[1], M = c.shape[1]
    cdef Py_ssize_t i, a, k
    cdef double ea
    if c.shape[0] != B:
        raise ValueError("moment_matrix: batch sizes differ")
    out = np.zeros((C, M))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(B):
            for a in range(C):
                ea = e[i, a]
                for k in range(M):
                    o[a, k] += ea * c[i, k]
        for a in range(C):
            for k in range(M):
                o[a, k] = o[a, k] / B
    return out


def stratum_sums(const double[:, ::1] c, const cnp.int64_t[::1] d, Py_ssize_t n_strata):
    cdef Py_ssize_t B = c.shape[0], M = c.shape[1], i, k
    cdef cnp.int64_t s
    sums_arr = np.zeros((n_strata, M))
    counts_arr = np.zeros(n_strata, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    for i in range(B):
        s = d[i]
        if s < 0 or s >= n_strata:
            raise IndexError("stratum id out of range")
        counts[s] += 1
        for k in range(M):
            sums[s, k] += c[i, k]
    return sums_arr, counts_arr


def power_iteration(const double[:, ::1] W, u_in, Py_ssize_t n_iters):
    cdef Py_ssize_t m = W.shape[0], n = W.shape[1], it, i, j
    cdef double norm, acc, sigma
    u_arr = np.array(u_in, dtype=np.float64, copy=True)
    v_arr = np.zeros(n)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    for it in range(n_iters):
        norm = 0.0
        for j in range(n):
            acc = 0.0
            for i in range(m):
                acc = acc + W[i, j] * u[i]
            v[j] = acc
            norm = norm + acc * acc
        norm = sqrt(norm)
        if norm < 1e-12:
            norm = 1e-12
        for j in range(n):
            v[j] = v[j] / norm
        norm = 0.0
        for i in range(m):
            acc = 0.0
            for j in range(n):
                acc = acc + W[i, j] * v[j]
            u[i] = acc
            norm = norm + acc * acc
        norm = sqrt(norm)
        if norm < 1e-12:
            norm = 1e-12
        for i in range(m):
            u[i] = u[i] / norm
    sigma = 0.0
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc = acc + W[i, j] * v[j]
        sigma = sigma + u[i] * acc
    return u_arr, v_arr, float(sigma)


def auroc(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    cdef double[::1] s = np.ascontiguousarray(scores[order], dtype=np.float64)
    cdef cnp.int64_t[::1] lab = np.ascontiguousarray(labels[order], dtype=np.int64)
    cdef Py_ssize_t n = s.shape[0], i = 0, j, k
    cdef double rank_sum = 0.0, n_pos = 0.0, r
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            if lab[k] == 1:
                rank_sum += r
                n_pos += 1.0
        i = j + 1
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * (n - n_pos))
