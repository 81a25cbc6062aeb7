"""Dense real-matrix factorizations used by the metrics, triggers and initializers.

All routines take and return float64 numpy arrays and never mutate inputs.
The SVD itself is delegated to LAPACK through numpy; this module pins down the
conventions the rest of the package relies on (ordering, full right bases,
cutoffs, error type).
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class FactorizationError(RuntimeError):
    """Raised when an SVD does not converge."""

    def __init__(self, shape: tuple[int, ...], reason: str = "SVD did not converge"):
        self.shape = tuple(shape)
        super().__init__(f"{reason} for matrix of shape {self.shape}")


class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


def as_matrix(A) -> np.ndarray:
    """Validate ``A`` as a non-empty finite 2-D float64 array."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {A.shape}")
    if A.size == 0:
        raise ValueError("matrix must be non-empty")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix contains NaN or Inf")
    return A


def svd(A, full: bool = False) -> SvdResult:
    """Singular value decomposition ``A = U @ diag(S) @ V.T``.

    ``S`` is non-increasing. With ``full=True`` the right basis ``V`` is square
    (``cols x cols``) so that its trailing columns span the kernel; otherwise
    ``U`` and ``V`` have ``min(rows, cols)`` columns.
    """
    A = as_matrix(A)
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=full)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(A.shape) from exc
    if full:
        # keep U thin; callers only ever need the full right basis
        U = U[:, : S.size]
    return SvdResult(U, S, Vt.T)


def singular_values(A) -> np.ndarray:
    A = as_matrix(A)
    try:
        return np.linalg.svd(A, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(A.shape) from exc


def default_rcond(A) -> float:
    return 1e-10 * max(np.shape(A))


def pseudoinverse(A, rcond: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values at or below ``rcond * max(S)`` are treated as zero.
    """
    A = as_matrix(A)
    if rcond is None:
        rcond = default_rcond(A)
    U, S, V = svd(A)
    cutoff = rcond * (S[0] if S.size else 0.0)
    keep = S > cutoff
    inv = np.zeros_like(S)
    inv[keep] = 1.0 / S[keep]
    return (V * inv) @ U.T


def kernel_basis(A, tol: float) -> np.ndarray:
    """Orthonormal basis (as columns) of the numerical kernel of ``A``.

    A right singular vector belongs to the kernel when its singular value is
    ``<= tol``; directions beyond ``min(rows, cols)`` have singular value zero.
    Returns a ``cols x 0`` array when ``A`` has full column rank.
    """
    A = as_matrix(A)
    _, S, V = svd(A, full=True)
    s_all = np.zeros(A.shape[1])
    s_all[: S.size] = S
    return V[:, s_all <= tol].copy()


def numerical_rank(A, tol: float) -> int:
    return int(np.count_nonzero(singular_values(A) > tol))


def project_onto_columns(v, B) -> np.ndarray:
    """Orthogonal projection ``B @ B.T @ v`` onto the span of orthonormal columns of ``B``."""
    v = np.asarray(v, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or v.shape[0] != B.shape[0]:
        raise ValueError(f"cannot project vector of length {v.shape[0]} onto basis of shape {B.shape}")
    if B.shape[1] == 0:
        return np.zeros_like(v)
    return B @ (B.T @ v)


def frobenius(A) -> float:
    return float(np.linalg.norm(A))
