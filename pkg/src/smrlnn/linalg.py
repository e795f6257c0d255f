"""Dense linear algebra used by the structure-keeper loss and the data generator.

Matrices are plain 2-D ``float64`` numpy arrays. Factorizations run on the
kernels selected in :mod:`smrlnn._backend`; numpy is used for products.
"""
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import DimensionError, NotPositiveDefiniteError


@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns follow eigenvalue order


def as_matrix(a, name="matrix"):
    """Validate external input as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def covariance(a, b):
    """Cross-covariance ``(1/n) Ac' Bc`` of column-centered ``a`` (n x p) and ``b`` (n x q)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"row mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise DimensionError("covariance needs at least 2 rows")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / n


def cholesky(s):
    s = np.ascontiguousarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got {s.shape}")
    try:
        return _backend.cholesky(s)
    except ValueError as exc:
        raise NotPositiveDefiniteError(exc.args[0]) from None


def chol_solve(s, b):
    """Solve ``S X = B`` for symmetric positive definite ``S``."""
    b = np.asarray(b, dtype=np.float64)
    vec = b.ndim == 1
    b2 = np.ascontiguousarray(b.reshape(-1, 1) if vec else b)
    if b2.shape[0] != np.shape(s)[0]:
        raise DimensionError(f"S is {np.shape(s)} but B has {b2.shape[0]} rows")
    l = cholesky(s)
    x = _backend.cho_solve_factored(l, b2)
    return x.ravel() if vec else x


def sym_eig(s):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Ties keep the lowest original index first.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s)))) if s.size else 1.0
    if s.size and np.max(np.abs(s - s.T)) > 1e-8 * scale:
        raise DimensionError("matrix is not symmetric")
    sym = np.ascontiguousarray(0.5 * (s + s.T))
    w, v, _ = _backend.jacobi_eigh(sym)
    order = np.argsort(-w, kind="stable")
    return SymEigResult(w[order], np.ascontiguousarray(v[:, order]))


def svd_values(t):
    """Singular values of ``t``, descending, via the smaller Gram matrix."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got {t.shape}")
    gram = t.T @ t if t.shape[1] <= t.shape[0] else t @ t.T
    w = sym_eig(gram).eigenvalues
    return np.sqrt(np.clip(w, 0.0, None))


def inv_sqrt(s, ridge=0.0):
    """``(S + ridge I)^(-1/2)`` for symmetric PSD ``S`` via its eigendecomposition."""
    eig = sym_eig(s)
    shifted = eig.eigenvalues + ridge
    if np.any(shifted <= 0):
        raise NotPositiveDefiniteError(int(np.argmin(shifted)))
    v = eig.eigenvectors
    return (v / np.sqrt(shifted)) @ v.T
