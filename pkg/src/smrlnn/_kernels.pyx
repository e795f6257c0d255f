# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical kernels.

Every function here has a drop-in twin in :mod:`smrlnn._fallback`; the two
must agree to rounding error and are compared in the test-suite and in
``bench/bench_kernels.py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def jacobi_eigh(double[:, ::1] a_in, double tol=1e-15, int max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(w, v, sweeps)`` with eigenvalues unsorted and eigenvectors as
    columns of ``v``.
    """
    cdef Py_ssize_t n = a_in.shape[0]
    cdef Py_ssize_t i, j, k, p, q
    cdef int sweep = 0
    cdef double off, fro, theta, t, c, s, tau, apq, app, aqq, g, h
    a_np = np.array(a_in, dtype=np.float64, copy=True)
    v_np = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] a = a_np
    cdef double[:, ::1] v = v_np

    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += a[i, j] * a[i, j]
    fro = sqrt(fro)
    if fro == 0.0 or n < 2:
        return np.diag(a_np).copy(), v_np, 0

    while sweep < max_sweeps:
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if sqrt(2.0 * off) <= tol * fro:
            break
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if fabs(apq) <= 1e-300:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + sqrt(1.0 + theta * theta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                tau = s / (1.0 + c)
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k != p and k != q:
                        g = a[k, p]
                        h = a[k, q]
                        a[k, p] = g - s * (h + tau * g)
                        a[p, k] = a[k, p]
                        a[k, q] = h + s * (g - tau * h)
                        a[q, k] = a[k, q]
                for k in range(n):
                    g = v[k, p]
                    h = v[k, q]
                    v[k, p] = g - s * (h + tau * g)
                    v[k, q] = h + s * (g - tau * h)
    w_np = np.empty(n, dtype=np.float64)
    for i in range(n):
        w_np[i] = a[i, i]
    return w_np, v_np, sweep


def cholesky(double[:, ::1] s_in):
    """Lower Cholesky factor. Raises ValueError(pivot_index) on a non-positive pivot."""
    cdef Py_ssize_t n = s_in.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double acc
    l_np = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] l = l_np
    for j in range(n):
        acc = s_in[j, j]
        for k in range(j):
            acc -= l[j, k] * l[j, k]
        if not acc > 0.0:
            raise ValueError(j)
        l[j, j] = sqrt(acc)
        for i in range(j + 1, n):
            acc = s_in[i, j]
            for k in range(j):
                acc -= l[i, k] * l[j, k]
            l[i, j] = acc / l[j, j]
    return l_np


def cho_solve_factored(double[:, ::1] l, double[:, ::1] b_in):
    """Solve ``L L' X = B`` given the lower factor ``L``."""
    cdef Py_ssize_t n = l.shape[0]
    cdef Py_ssize_t m = b_in.shape[1]
    cdef Py_ssize_t i, k, c
    cdef double acc
    x_np = np.array(b_in, dtype=np.float64, copy=True)
    cdef double[:, ::1] x = x_np
    for c in range(m):
        for i in range(n):
            acc = x[i, c]
            for k in range(i):
                acc -= l[i, k] * x[k, c]
            x[i, c] = acc / l[i, i]
        for i in range(n - 1, -1, -1):
            acc = x[i, c]
            for k in range(i + 1, n):
                acc -= l[k, i] * x[k, c]
            x[i, c] = acc / l[i, i]
    return x_np


def greedy_match(double[::1] p_treated, double[::1] p_control, long[::1] order):
    """Nearest-propensity matching without replacement.

    ``order`` lists treated indices in processing order. Returns one control
    index per treated unit (-1 once controls are exhausted). Ties go to the
    lowest control index.
    """
    cdef Py_ssize_t nt = p_treated.shape[0]
    cdef Py_ssize_t nc = p_control.shape[0]
    cdef Py_ssize_t r, i, j, best
    cdef double d, best_d
    out_np = np.full(nt, -1, dtype=np.int64)
    used_np = np.zeros(nc, dtype=np.uint8)
    cdef long[::1] out = out_np
    cdef unsigned char[::1] used = used_np
    for r in range(order.shape[0]):
        i = order[r]
        best = -1
        best_d = 0.0
        for j in range(nc):
            if used[j]:
                continue
            d = fabs(p_treated[i] - p_control[j])
            if best < 0 or d < best_d:
                best = j
                best_d = d
        if best < 0:
            break
        used[best] = 1
        out[i] = best
    return out_np
