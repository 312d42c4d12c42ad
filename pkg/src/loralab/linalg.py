"""Dense linear-algebra kernels.

Matrices are plain 2-D float64 numpy arrays. Every exported operation
validates shapes and finiteness, so downstream modules can assume clean
carriers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .errors import (
    ConditioningError,
    DegenerateInputError,
    DomainError,
    InsufficientDataError,
    ShapeError,
    UsageError,
)
from .rng import RngStream

PIVOT_TOL = 1e-10

__all__ = [
    "PIVOT_TOL",
    "QrPair",
    "as_matrix",
    "matmul",
    "qr_thin",
    "qr_backward",
    "covariance",
    "mahalanobis_sq",
    "mahalanobis_sq_many",
    "gaussian_sample",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array (C order)."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise DomainError(f"{name} contains non-finite entries")
    return a


@dataclass
class QrPair:
    """Thin QR factors plus the tape needed by the reverse-mode rule.

    ``q`` has orthonormal columns, ``r`` is upper triangular with a strictly
    positive diagonal, and ``q @ r`` reconstructs the input. ``tape`` holds
    the recorded Gram-Schmidt intermediates; it is ``None`` only for pairs
    assembled outside :func:`qr_thin`, which cannot be differentiated.
    """

    q: np.ndarray
    r: np.ndarray
    tape: tuple | None = None


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def qr_thin(a) -> QrPair:
    """Thin QR with positive diagonal, by taped modified Gram-Schmidt.

    Requires ``rows >= cols`` and numerically full column rank (every pivot
    at least ``PIVOT_TOL``); rank-deficient input raises
    :class:`DegenerateInputError` rather than being silently regularized.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m < n:
        raise ShapeError(f"thin QR needs rows >= cols, got {a.shape}")
    if n == 0:
        raise ShapeError("thin QR needs at least one column")
    try:
        q, r, r1, r2, tape = kernels.qr_forward(a, PIVOT_TOL)
    except ZeroDivisionError as exc:
        raise DegenerateInputError(f"rank-deficient input to QR: {exc}") from exc
    return QrPair(q=q, r=r, tape=(r1, r2, tape))


def qr_backward(pair: QrPair, q_cotangent) -> np.ndarray:
    """Gradient of a scalar function of Q with respect to the QR input.

    ``q_cotangent`` is dL/dQ; the return value is dL/dA for the matrix that
    produced ``pair``.
    """
    if pair.tape is None:
        raise UsageError("QrPair has no tape; produce it with qr_thin")
    g = as_matrix(q_cotangent, "q_cotangent")
    if g.shape != pair.q.shape:
        raise ShapeError(f"cotangent shape {g.shape} != Q shape {pair.q.shape}")
    r1, r2, tape = pair.tape
    return kernels.qr_backward(pair.q, pair.r, r1, r2, tape, g)


def covariance(samples, mean) -> np.ndarray:
    """Sample covariance (divisor N-1) around a given mean row."""
    x = as_matrix(samples, "samples")
    mu = as_matrix(mean, "mean")
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"covariance needs at least 2 samples, got {n}")
    if mu.shape != (1, d):
        raise ShapeError(f"mean must be 1x{d}, got {mu.shape}")
    c = x - mu
    cov = (c.T @ c) / (n - 1)
    # Force exact symmetry; the product is symmetric only up to rounding.
    return (cov + cov.T) / 2.0


def _chol_shrunk(sigma: np.ndarray, shrinkage: float) -> np.ndarray:
    if shrinkage < 0:
        raise DomainError(f"shrinkage must be nonnegative, got {shrinkage}")
    s = sigma if shrinkage == 0 else sigma + shrinkage * np.eye(sigma.shape[0])
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(
            f"covariance plus {shrinkage:g}*I is not positive definite"
        ) from exc


def mahalanobis_sq(f, mu, sigma, shrinkage: float = 0.0) -> float:
    """Squared Mahalanobis distance (f-mu)(Sigma+eps*I)^-1(f-mu)^T.

    Computed via a Cholesky solve; ``shrinkage`` is the ridge eps added to
    the diagonal.
    """
    f = as_matrix(f, "f")
    mu = as_matrix(mu, "mu")
    sigma = as_matrix(sigma, "sigma")
    d = sigma.shape[0]
    if sigma.shape != (d, d):
        raise ShapeError(f"sigma must be square, got {sigma.shape}")
    if f.shape != (1, d) or mu.shape != (1, d):
        raise ShapeError(f"f and mu must be 1x{d}, got {f.shape} and {mu.shape}")
    low = _chol_shrunk(sigma, shrinkage)
    z = solve_triangular(low, (f - mu).ravel(), lower=True)
    return float(z @ z)


def mahalanobis_sq_many(rows, mu, sigma, shrinkage: float = 0.0) -> np.ndarray:
    """Vectorized :func:`mahalanobis_sq` over the rows of one matrix."""
    x = as_matrix(rows, "rows")
    mu = as_matrix(mu, "mu")
    sigma = as_matrix(sigma, "sigma")
    low = _chol_shrunk(sigma, shrinkage)
    z = solve_triangular(low, (x - mu).T, lower=True)
    return np.einsum("ij,ij->j", z, z)


def gaussian_sample(rng: RngStream, mean, diag_var, n: int) -> np.ndarray:
    """Draw ``n`` rows from N(mean, diag(diag_var)), deterministic per stream."""
    mu = as_matrix(mean, "mean")
    var = as_matrix(diag_var, "diag_var")
    if mu.shape != var.shape or mu.shape[0] != 1:
        raise ShapeError(f"mean and diag_var must both be 1xD, got {mu.shape}, {var.shape}")
    if (var < 0).any():
        raise DomainError("diag_var has negative entries")
    if n < 0:
        raise DomainError(f"sample count must be nonnegative, got {n}")
    d = mu.shape[1]
    z = rng.normal((n, d))
    return mu + np.sqrt(var) * z
