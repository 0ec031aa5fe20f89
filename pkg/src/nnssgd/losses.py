"""Elementwise sum losses f(X) = sum_ij f_ij(X_ij) over an observation grid.

Each loss holds the observed targets, a scalar weight, and a ``masked``
flag. Masked losses are supported on the observed cells only; unmasked
losses treat unobserved cells as zero-valued targets (zero-imputed
residuals). All pieces are convex in x, and
``column_subgrad`` evaluates a whole column of the gradient at once, which
is what makes column-probe steps cheap.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .data import SparseObservations
from .errors import InvalidArgumentError
from .linalg import CompactSVD

__all__ = [
    "SumLoss",
    "SquaredLoss",
    "AbsoluteLoss",
    "SmoothedHingeLoss",
    "make_loss",
    "observed_values",
    "LOSS_KINDS",
]

LOSS_KINDS = ("squared", "absolute", "hinge")


def observed_values(X: CompactSVD, obs: SparseObservations) -> np.ndarray:
    """X evaluated at every observed cell, in O(nnz * rank)."""
    return np.einsum("er,r,er->e", X.U[obs.rows], X.sigma, X.V[obs.cols])


class SumLoss:
    """Base class; subclasses define the scalar piece and its subgradient."""

    kind = "abstract"

    def __init__(self, obs: SparseObservations, weight: float = 1.0, masked: bool = True):
        if weight <= 0 or not np.isfinite(weight):
            raise InvalidArgumentError(f"loss weight must be positive, got {weight}")
        self.obs = obs
        self.weight = float(weight)
        self.masked = bool(masked)

    @property
    def shape(self) -> tuple[int, int]:
        return self.obs.shape

    # Subclasses: vectorized value/subgradient of the piece at x with target z.
    def _piece(self, x, z):
        raise NotImplementedError

    def _piece_subgrad(self, x, z):
        raise NotImplementedError

    def value_at(self, i: int, j: int, x: float) -> float:
        z = self._target(i, j)
        if z is None:
            return 0.0
        return float(self._piece(np.float64(x), np.float64(z)))

    def subgrad_at(self, i: int, j: int, x: float) -> float:
        z = self._target(i, j)
        if z is None:
            return 0.0
        return float(self._piece_subgrad(np.float64(x), np.float64(z)))

    def _target(self, i: int, j: int):
        rows, vals = self.obs.column(j)
        pos = np.searchsorted(rows, i)
        if pos < rows.size and rows[pos] == i:
            return vals[pos]
        return 0.0 if not self.masked else None

    def column_subgrad(self, j: int, x_col: np.ndarray) -> np.ndarray:
        """Gradient column j given the dense column of X."""
        out = np.zeros(self.obs.m)
        rows, vals = self.obs.column(j)
        if self.masked:
            out[rows] = self._piece_subgrad(x_col[rows], vals)
            return out
        z = np.zeros(self.obs.m)
        z[rows] = vals
        return self._piece_subgrad(x_col, z)

    def total_value(self, X: CompactSVD) -> float:
        xs = observed_values(X, self.obs)
        on_grid = float(np.sum(self._piece(xs, self.obs.values)))
        if self.masked:
            return on_grid
        return on_grid + self._off_grid_total(X, xs)

    def _off_grid_total(self, X: CompactSVD, xs: np.ndarray) -> float:
        # Generic fallback: materialize. Subclasses override when a factored
        # form exists. Desk-scale only.
        dense = X.densify()
        dense[self.obs.rows, self.obs.cols] = 0.0
        mask = np.ones((self.obs.m, self.obs.n), dtype=bool)
        mask[self.obs.rows, self.obs.cols] = False
        return float(np.sum(self._piece(dense[mask], 0.0)))

    def grad_times_dense(self, X: CompactSVD, Y: np.ndarray) -> np.ndarray:
        """grad f(X) @ Y for a dense n-by-k sketch Y."""
        if self.masked:
            g = self._piece_subgrad(observed_values(X, self.obs), self.obs.values)
            G = sp.csc_matrix((g, (self.obs.rows, self.obs.cols)), shape=self.obs.shape)
            return G @ Y
        Z = self.obs.densify()
        return self._piece_subgrad(X.densify(), Z) @ Y


class SquaredLoss(SumLoss):
    """weight * (x - z)^2."""

    kind = "squared"

    def _piece(self, x, z):
        d = x - z
        return self.weight * d * d

    def _piece_subgrad(self, x, z):
        return 2.0 * self.weight * (x - z)

    def _off_grid_total(self, X: CompactSVD, xs: np.ndarray) -> float:
        # sum of w * x^2 off the grid = w * (||X||_F^2 - sum_on_grid x^2)
        return self.weight * (X.frobenius_norm() ** 2 - float(np.sum(xs * xs)))

    def grad_times_dense(self, X: CompactSVD, Y: np.ndarray) -> np.ndarray:
        if self.masked:
            return super().grad_times_dense(X, Y)
        XY = X.U @ (X.sigma[:, None] * (X.V.T @ Y)) if X.rank else np.zeros((X.m, Y.shape[1]))
        return 2.0 * self.weight * (XY - self.obs.to_csc() @ Y)


class AbsoluteLoss(SumLoss):
    """weight * |x - z|; subgradient picks sign(x - z), 0 at the kink."""

    kind = "absolute"

    def _piece(self, x, z):
        return self.weight * np.abs(x - z)

    def _piece_subgrad(self, x, z):
        return self.weight * np.sign(x - z)


class SmoothedHingeLoss(SumLoss):
    """Smooth hinge on the margin z*x, for sign-valued targets.

    Zero for margins above 1, quadratic on [0, 1], linear below 0.
    """

    kind = "hinge"

    def _piece(self, x, z):
        u = np.asarray(z * x, dtype=np.float64)
        quad = 0.5 * np.square(1.0 - u)
        out = np.where(u >= 1.0, 0.0, np.where(u <= 0.0, 0.5 - u, quad))
        return self.weight * out

    def _piece_subgrad(self, x, z):
        u = np.asarray(z * x, dtype=np.float64)
        du = np.where(u >= 1.0, 0.0, np.where(u <= 0.0, -1.0, u - 1.0))
        return self.weight * np.asarray(z, dtype=np.float64) * du


_LOSSES = {cls.kind: cls for cls in (SquaredLoss, AbsoluteLoss, SmoothedHingeLoss)}


def make_loss(kind: str, obs: SparseObservations, weight: float = 1.0,
              masked: bool = True) -> SumLoss:
    if kind not in _LOSSES:
        raise InvalidArgumentError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return _LOSSES[kind](obs, weight=weight, masked=masked)
