"""Dense linear-algebra kernels the solver is built on.

Everything here operates on plain float64 numpy arrays. The two workhorse
factorizations wrap LAPACK (Householder QR via ``numpy.linalg.qr`` with a
fixed sign convention, and divide-and-conquer SVD of the Golub-Kahan
bidiagonal form via ``numpy.linalg.svd``); the truncated SVD of a sparse
matrix is a randomized subspace iteration built on top of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, NumericalFailureError

__all__ = [
    "CompactSVD",
    "reduced_qr",
    "small_svd",
    "truncate_svd",
    "tsvd_sparse",
]


@dataclass(frozen=True)
class CompactSVD:
    """A matrix held as U @ diag(sigma) @ V.T with orthonormal U, V.

    ``sigma`` is strictly positive and non-increasing; rank 0 (all-zero
    matrix) is represented by empty factors that still carry the shape.
    """

    U: np.ndarray       # (m, p), orthonormal columns
    sigma: np.ndarray   # (p,), positive, non-increasing
    V: np.ndarray       # (n, p), orthonormal columns

    @classmethod
    def zero(cls, m: int, n: int) -> "CompactSVD":
        return cls(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.sigma.size

    def densify(self) -> np.ndarray:
        """Materialize the full m-by-n matrix. Small problems only."""
        return (self.U * self.sigma) @ self.V.T

    def column(self, j: int) -> np.ndarray:
        """Column j as a dense m-vector, in O(m * rank) time."""
        return self.U @ (self.sigma * self.V[j])

    def entry(self, i: int, j: int) -> float:
        return float(np.dot(self.U[i] * self.sigma, self.V[j]))

    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.sigma))

    def nuclear_norm(self) -> float:
        return float(np.sum(self.sigma))

    def copy(self) -> "CompactSVD":
        return CompactSVD(self.U.copy(), self.sigma.copy(), self.V.copy())

    def orthonormality_error(self) -> float:
        """Max-entry deviation of U'U and V'V from the identity."""
        p = self.rank
        if p == 0:
            return 0.0
        du = np.abs(self.U.T @ self.U - np.eye(p)).max()
        dv = np.abs(self.V.T @ self.V - np.eye(p)).max()
        return float(max(du, dv))


def _require_finite(A: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(A)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")


def _fix_qr_signs(Q: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Canonical form: non-negative diagonal of R. Zero stays as-is.
    flip = np.where(np.diagonal(R) < 0, -1.0, 1.0)
    return Q * flip, R * flip[:, None]


def reduced_qr(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR of a tall matrix A (m >= p): A = Q @ R.

    Q is m-by-p with orthonormal columns, R is p-by-p upper-triangular with
    a non-negative diagonal (sign convention fixed for determinism).
    Computed by LAPACK's Householder factorization.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise InvalidArgumentError(f"expected a nonempty 2-d matrix, got shape {A.shape}")
    m, p = A.shape
    if m < p:
        raise InvalidArgumentError(f"reduced_qr needs m >= p, got {m} x {p}")
    _require_finite(A, "A")
    Q, R = np.linalg.qr(A, mode="reduced")
    return _fix_qr_signs(Q, R)


def _qr_panel(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Internal variant that also accepts wide panels (Q: m x min(m, p)).
    Q, R = np.linalg.qr(np.asarray(A, dtype=np.float64), mode="reduced")
    return _fix_qr_signs(Q, R)


def small_svd(T: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD of a small dense matrix: T = M @ diag(s) @ N.T.

    Targets the (rank + probe width)-sized cores that arise in the
    incremental update; any cubic method would do, we use LAPACK's
    divide-and-conquer solver on the Golub-Kahan bidiagonal form.
    Returns (M, s, N) with s non-negative and non-increasing.
    """
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] < 1 or T.shape[1] < 1:
        raise InvalidArgumentError(f"expected a nonempty 2-d matrix, got shape {T.shape}")
    _require_finite(T, "T")
    M, s, Nt = np.linalg.svd(T, full_matrices=False)
    return M, s, Nt.T


def _drop_tolerance(m: int, n: int, leading: float) -> float:
    # Rank-revealing convention for "numerically zero" singular values.
    return max(m, n) * np.finfo(np.float64).eps * leading


def _compact(U: np.ndarray, s: np.ndarray, V: np.ndarray) -> CompactSVD:
    """Drop numerically-zero singular values and freeze the triplet."""
    m, n = U.shape[0], V.shape[0]
    if s.size == 0 or s[0] <= 0.0:
        return CompactSVD.zero(m, n)
    keep = s > _drop_tolerance(m, n, s[0])
    p = int(np.count_nonzero(keep))
    return CompactSVD(np.ascontiguousarray(U[:, :p]), s[:p].copy(),
                      np.ascontiguousarray(V[:, :p]))


def truncate_svd(X: CompactSVD, t: int) -> CompactSVD:
    """Keep the leading min(t, rank) singular triplets of X.

    By Eckart-Young this is the best rank-t Frobenius approximation.
    t >= rank(X) is a no-op.
    """
    if t < 0:
        raise InvalidArgumentError(f"rank bound must be >= 0, got {t}")
    if t >= X.rank:
        return X
    return CompactSVD(np.ascontiguousarray(X.U[:, :t]), X.sigma[:t].copy(),
                      np.ascontiguousarray(X.V[:, :t]))


_TSVD_OVERSAMPLE = 10
_TSVD_MIN_POWER_ITERS = 4
_TSVD_MAX_ITERS = 500


def tsvd_sparse(Z, t: int, seed: int = 0, tol: float = 1e-8) -> CompactSVD:
    """Rank-t truncated SVD of a sparse matrix by randomized subspace iteration.

    ``Z`` is a scipy sparse matrix or anything exposing ``to_csc()``.
    The sketch is oversampled by 10 columns and refined by power iterations
    (at least 4) until the Rayleigh-Ritz residuals of the retained triplets
    drop below ``tol`` relative to the leading singular value. Triplets with
    numerically zero singular values are dropped, so the result may have
    rank below t.
    """
    if hasattr(Z, "to_csc"):
        Z = Z.to_csc()
    A = sp.csc_matrix(Z, dtype=np.float64)
    m, n = A.shape
    if not 1 <= t <= min(m, n):
        raise InvalidArgumentError(f"rank {t} out of range for a {m} x {n} matrix")

    if A.nnz == 0:
        return CompactSVD.zero(m, n)

    width = min(t + _TSVD_OVERSAMPLE, min(m, n))
    rng = np.random.Generator(np.random.PCG64(seed))
    Q = _qr_panel(A @ rng.standard_normal((n, width)))[0]

    last_residual = np.inf
    for it in range(1, _TSVD_MAX_ITERS + 1):
        Q = _qr_panel(A.T @ Q)[0]
        Q = _qr_panel(A @ Q)[0]
        if it < _TSVD_MIN_POWER_ITERS:
            continue
        # Rayleigh-Ritz on the current subspace.
        B = Q.T @ A          # width x n, dense
        M, s, N = small_svd(B)
        U = Q @ M
        cand = truncate_svd(_compact(U, s, N), t)
        if cand.rank == 0:
            return cand
        # Two-sided residuals of the retained triplets.
        RU = A @ cand.V - cand.U * cand.sigma
        RV = A.T @ cand.U - cand.V * cand.sigma
        last_residual = max(
            np.linalg.norm(RU, axis=0).max(), np.linalg.norm(RV, axis=0).max()
        ) / cand.sigma[0]
        if last_residual <= tol:
            return cand
    raise NumericalFailureError(
        f"subspace iteration did not reach tol={tol:g} within "
        f"{_TSVD_MAX_ITERS} iterations (last residual {last_residual:.3e})",
        iterations=_TSVD_MAX_ITERS,
        residual=float(last_residual),
    )
