"""Dense SVD and minimum-norm least-squares solves.

The NED step direction is the pseudoinverse solution of a tall (or wide)
Jacobian system. Everything here works on plain float64 ndarrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class SolverError(RuntimeError):
    """Raised when LAPACK fails to converge or the input is not finite."""


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SolverError("matrix has non-finite entries")
    return a


def default_rel_tol(shape: tuple[int, int]) -> float:
    return max(shape) * np.finfo(np.float64).eps


def svd(a) -> SvdFactors:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` nonincreasing.

    Tries the divide-and-conquer driver first and falls back to the QR
    iteration driver, which converges in some cases gesdd does not.
    """
    a = _as_matrix(a)
    if a.size == 0:
        k = min(a.shape)
        return SvdFactors(np.zeros((a.shape[0], k)), np.zeros(k), np.zeros((k, a.shape[1])))
    for driver in ("gesdd", "gesvd"):
        try:
            u, s, vt = sla.svd(a, full_matrices=False, check_finite=False, lapack_driver=driver)
        except np.linalg.LinAlgError:
            continue
        return SvdFactors(u, s, vt)
    raise SolverError(f"SVD did not converge for a {a.shape[0]}x{a.shape[1]} matrix")


def _tall_factors(a: np.ndarray, b: np.ndarray) -> tuple[SvdFactors, np.ndarray]:
    # A = QR, R = U S V^T  =>  A = (QU) S V^T; only Q^T b is ever needed.
    qtb, r = sla.qr_multiply(a, b, mode="right")
    f = svd(r)
    return f, f.u.T @ qtb


def pinv_solve(a, b, rel_tol: float | None = None) -> tuple[np.ndarray, int]:
    """Minimum-norm least-squares solution of ``a @ x ~= b``.

    Singular values below ``rel_tol * s_max`` are discarded.

    Returns
    -------
    x : ndarray, shape (a.shape[1],)
    rank : int
        Number of singular values kept. ``rank == 0`` means the system
        carried no usable information and ``x`` is the zero vector.
    """
    a = _as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (a.shape[0],):
        raise ValueError(f"rhs has shape {b.shape}, expected ({a.shape[0]},)")
    if not np.all(np.isfinite(b)):
        raise SolverError("right-hand side has non-finite entries")
    if rel_tol is None:
        rel_tol = default_rel_tol(a.shape)
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")

    m, n = a.shape
    if m == 0 or n == 0:
        return np.zeros(n), 0
    if m > n:
        f, utb = _tall_factors(a, b)
    else:
        f = svd(a)
        utb = f.u.T @ b
    s = f.s
    if s[0] == 0.0:
        return np.zeros(n), 0
    keep = s >= rel_tol * s[0]
    rank = int(np.count_nonzero(keep))
    x = f.vt[:rank].T @ (utb[:rank] / s[:rank])
    return x, rank


def pinv(a, rel_tol: float | None = None) -> np.ndarray:
    """Explicit truncated pseudoinverse; used by tests and small diagnostics."""
    f = svd(a)
    a = np.asarray(a)
    if f.s.size == 0 or f.s[0] == 0.0:
        return np.zeros(a.shape[::-1])
    if rel_tol is None:
        rel_tol = default_rel_tol(a.shape)
    r = int(np.count_nonzero(f.s >= rel_tol * f.s[0]))
    return (f.vt[:r].T / f.s[:r]) @ f.u[:, :r].T
