# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled QR kernels: taped modified Gram-Schmidt forward and reverse.

Mirrors ``loralab.kernels.pure`` exactly (same algorithm, same tape layout);
see that module for the layout documentation. The compiled version exists
because the reverse pass is a tight O(n^2) loop of short vector ops, which
is overhead-bound in numpy for the small adapter matrices this package
factors thousands of times per run.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND = "compiled"


def qr_forward(a, double pivot_tol):
    cdef cnp.ndarray[double, ndim=2, mode="c"] a_c = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t m = a_c.shape[0]
    cdef Py_ssize_t n = a_c.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] q = np.empty((m, n))
    cdef cnp.ndarray[double, ndim=2, mode="c"] r = np.zeros((n, n))
    cdef cnp.ndarray[double, ndim=2, mode="c"] r1 = np.zeros((n, n))
    cdef cnp.ndarray[double, ndim=2, mode="c"] r2 = np.zeros((n, n))
    cdef cnp.ndarray[double, ndim=2, mode="c"] tape = np.empty((n * n, m))
    cdef cnp.ndarray[double, ndim=1, mode="c"] v = np.empty(m)
    cdef Py_ssize_t i, j, k, t, base, sweep
    cdef double s, norm

    for j in range(n):
        for t in range(m):
            v[t] = a_c[t, j]
        base = j * j
        k = 0
        for sweep in range(2):
            for i in range(j):
                s = 0.0
                for t in range(m):
                    tape[base + k, t] = v[t]
                    s += q[t, i] * v[t]
                for t in range(m):
                    v[t] -= s * q[t, i]
                if sweep == 0:
                    r1[i, j] = s
                else:
                    r2[i, j] = s
                k += 1
        norm = 0.0
        for t in range(m):
            tape[base + k, t] = v[t]
            norm += v[t] * v[t]
        norm = sqrt(norm)
        if norm < pivot_tol:
            raise ZeroDivisionError(
                f"pivot {norm:.3e} below tolerance {pivot_tol:.3e} at column {j}"
            )
        for t in range(m):
            q[t, j] = v[t] / norm
        r[j, j] = norm
        for i in range(j):
            r[i, j] = r1[i, j] + r2[i, j]
    return q, r, r1, r2, tape


def qr_backward(q, r, r1, r2, tape, q_bar):
    cdef cnp.ndarray[double, ndim=2, mode="c"] q_c = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] r_c = np.ascontiguousarray(r, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] r1_c = np.ascontiguousarray(r1, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] r2_c = np.ascontiguousarray(r2, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] tape_c = np.ascontiguousarray(tape, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] qb = np.array(q_bar, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t m = q_c.shape[0]
    cdef Py_ssize_t n = q_c.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] a_bar = np.empty((m, n))
    cdef cnp.ndarray[double, ndim=1, mode="c"] v_bar = np.empty(m)
    cdef Py_ssize_t i, j, k, t, base
    cdef double s, dot, s_bar

    for j in range(n - 1, -1, -1):
        base = j * j
        dot = 0.0
        for t in range(m):
            dot += q_c[t, j] * qb[t, j]
        for t in range(m):
            v_bar[t] = (qb[t, j] - q_c[t, j] * dot) / r_c[j, j]
        for k in range(2 * j - 1, -1, -1):
            i = k if k < j else k - j
            s = r1_c[i, j] if k < j else r2_c[i, j]
            s_bar = 0.0
            for t in range(m):
                s_bar -= q_c[t, i] * v_bar[t]
            for t in range(m):
                qb[t, i] += s_bar * tape_c[base + k, t] - s * v_bar[t]
                v_bar[t] += s_bar * q_c[t, i]
        for t in range(m):
            a_bar[t, j] = v_bar[t]
    return a_bar
