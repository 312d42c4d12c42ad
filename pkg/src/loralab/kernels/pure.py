"""Pure numpy twin of the compiled QR kernels.

Thin QR by modified Gram-Schmidt with one reorthogonalization sweep per
column (the second sweep keeps the columns orthonormal to machine precision
even for poorly conditioned full-rank inputs).  The forward pass records
every intermediate vector so the reverse pass can differentiate the
elementary projection and normalization steps one by one.

Tape layout: column ``j`` performs ``2*j`` projection steps (two sweeps over
the previous columns) followed by a normalization.  Row ``j*j + k`` of the
tape holds the working vector *entering* step ``k``; row ``j*j + 2*j`` holds
the vector entering the normalization.  The sweep coefficients live in the
strict upper triangles of ``r1`` and ``r2`` and sum to the reported ``r``.
"""

from __future__ import annotations

import numpy as np

BACKEND = "pure"


def qr_forward(a: np.ndarray, pivot_tol: float):
    """Factor ``a`` (m x n, m >= n) into Q, R plus the backward tape.

    Returns ``(q, r, r1, r2, tape)``.  Raises ``ZeroDivisionError`` when a
    pivot falls below ``pivot_tol`` (the caller maps this to a typed error).
    """
    m, n = a.shape
    q = np.empty((m, n))
    r = np.zeros((n, n))
    r1 = np.zeros((n, n))
    r2 = np.zeros((n, n))
    tape = np.empty((n * n, m))
    for j in range(n):
        v = a[:, j].copy()
        base = j * j
        k = 0
        for rmat in (r1, r2):
            for i in range(j):
                tape[base + k] = v
                s = q[:, i] @ v
                v -= s * q[:, i]
                rmat[i, j] = s
                k += 1
        tape[base + k] = v
        norm = float(np.sqrt(v @ v))
        if norm < pivot_tol:
            raise ZeroDivisionError(
                f"pivot {norm:.3e} below tolerance {pivot_tol:.3e} at column {j}"
            )
        q[:, j] = v / norm
        r[j, j] = norm
        r[:j, j] = r1[:j, j] + r2[:j, j]
    return q, r, r1, r2, tape


def qr_backward(
    q: np.ndarray,
    r: np.ndarray,
    r1: np.ndarray,
    r2: np.ndarray,
    tape: np.ndarray,
    q_bar: np.ndarray,
) -> np.ndarray:
    """Pull a cotangent on Q back to the factored input.

    Unwinds the recorded elementary steps in reverse. Later columns are
    processed first so their contributions to earlier columns' cotangents
    are complete by the time those columns normalize.
    """
    m, n = q.shape
    q_bar = q_bar.copy()
    a_bar = np.empty((m, n))
    for j in range(n - 1, -1, -1):
        base = j * j
        # Reverse of q_j = v / ||v||: project the cotangent off q_j.
        qj = q[:, j]
        g = q_bar[:, j]
        v_bar = (g - qj * (qj @ g)) / r[j, j]
        for k in range(2 * j - 1, -1, -1):
            i = k if k < j else k - j
            s = r1[i, j] if k < j else r2[i, j]
            v_in = tape[base + k]
            qi = q[:, i]
            # Reverse of v_out = v_in - s*q_i with s = q_i . v_in.
            s_bar = -(qi @ v_bar)
            q_bar[:, i] += s_bar * v_in - s * v_bar
            v_bar += s_bar * qi
        a_bar[:, j] = v_bar
    return a_bar
