"""Stochastic subgradient descent for nuclear-norm-regularized objectives.

The engine minimizes F(X) = f(X) + reg * ||X||_* over the Frobenius ball
of a given radius, keeping every iterate in compact SVD form. One step
probes the subgradient with a random sketch, giving a rank-k step matrix
S @ Y.T, and folds it into the factorization through two tall-skinny QR
factorizations and one small SVD; no m-by-n matrix is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError
from .linalg import CompactSVD, _compact, _qr_panel, small_svd, truncate_svd
from .losses import SumLoss
from .probing import ProbeMatrix, probe_step_factors, sample_probe

__all__ = [
    "project_fro_ball",
    "nuclear_subgradient_factors",
    "subgradient_probe",
    "incremental_update",
    "objective",
    "fixed_horizon_step_size",
    "ssgd_minimize",
    "SolverState",
    "prox_gradient_solve",
]


def project_fro_ball(X: CompactSVD, radius: float) -> CompactSVD:
    """Nearest point of {||X||_F <= radius}: rescale sigma, factors untouched."""
    if not radius > 0:
        raise InvalidArgumentError(f"ball radius must be positive, got {radius}")
    norm = X.frobenius_norm()
    if norm <= radius:
        return X
    return CompactSVD(X.U, X.sigma * (radius / norm), X.V)


def nuclear_subgradient_factors(X: CompactSVD) -> tuple[np.ndarray, np.ndarray]:
    """The factor pair (U, V) of the nuclear-norm subgradient U @ V.T.

    X is compact (every singular value positive), so no further column
    truncation is needed; the product has Frobenius norm sqrt(rank).
    """
    return X.U, X.V


def subgradient_probe(
    X: CompactSVD,
    loss: SumLoss,
    reg_weight: float,
    probe: ProbeMatrix,
) -> np.ndarray:
    """S = (grad f(X) + reg * U @ V.T) @ Y, an m-by-k dense matrix.

    For column-sampling probes this touches only the k sampled columns:
    each is reconstructed from the factors in O(m * rank), the elementwise
    subgradients are applied, and the sqrt(n/k) probe scale is folded in
    once.
    """
    if reg_weight < 0:
        raise InvalidArgumentError(f"regularization weight must be >= 0, got {reg_weight}")
    m, n = loss.shape
    if X.shape != (m, n) or probe.n != n:
        raise InvalidArgumentError(
            f"shape mismatch: X {X.shape}, loss {loss.shape}, probe n={probe.n}"
        )
    if probe.kind == "column_sampling":
        S = np.empty((m, probe.k))
        for pos, j in enumerate(probe.indices):
            j = int(j)
            x_col = X.column(j) if X.rank else np.zeros(m)
            col = loss.column_subgrad(j, x_col)
            if reg_weight > 0 and X.rank:
                col = col + reg_weight * (X.U @ X.V[j])
            S[:, pos] = col
        S *= probe.scale
        return S
    Y = probe.matrix
    S = loss.grad_times_dense(X, Y)
    if reg_weight > 0 and X.rank:
        S = S + reg_weight * (X.U @ (X.V.T @ Y))
    return S


def incremental_update(
    X: CompactSVD,
    S: np.ndarray,
    probe: ProbeMatrix,
    step: float,
    rank_cap: int | None,
    radius: float,
    single_probe_scale: bool = False,
) -> CompactSVD:
    """Compact SVD of project(truncate(X - step * S @ Y.T)) without densifying.

    Stacks [U * sigma | S] and [V | -step * Y], reduces both with QR,
    takes the SVD of the small core R_U @ R_V.T, recombines, truncates to
    ``rank_cap``, drops numerically-zero singular values, and rescales onto
    the Frobenius ball. Cost is dominated by the QR of the m-by-(rank + k)
    panel.
    """
    S, Y_right = probe_step_factors(S, probe, single_probe_scale=single_probe_scale)
    m, n = X.shape
    if S.shape[0] != m or Y_right.shape[0] != n:
        raise InvalidArgumentError(
            f"step factors {S.shape} x {Y_right.shape} do not match X {X.shape}"
        )
    if not np.isfinite(step):
        raise InvalidArgumentError(f"step size must be finite, got {step}")
    if rank_cap is None:
        rank_cap = min(m, n)
    if rank_cap < 0:
        raise InvalidArgumentError(f"rank cap must be >= 0, got {rank_cap}")

    if X.rank:
        U_hat = np.hstack([X.U * X.sigma, S])
        V_hat = np.hstack([X.V, -step * Y_right])
    else:
        U_hat = S
        V_hat = -step * Y_right

    QU, RU = _qr_panel(U_hat)
    QV, RV = _qr_panel(V_hat)
    M, s, N = small_svd(RU @ RV.T)
    updated = _compact(QU @ M, s, QV @ N)
    return project_fro_ball(truncate_svd(updated, rank_cap), radius)


def objective(X: CompactSVD, loss: SumLoss, reg_weight: float) -> float:
    """F(X) = f(X) + reg * ||X||_*."""
    return loss.total_value(X) + reg_weight * X.nuclear_norm()


def fixed_horizon_step_size(
    probe_width: int,
    radius: float,
    n: int,
    grad_bound: float,
    reg_weight: float,
    rank_bound: int,
    total_iters: int,
    balance: float = 1.0,
) -> float:
    """Variance-balanced constant step for a T-iteration run.

    balance * sqrt(k) * radius / (sqrt(n) * (G + reg * sqrt(r)) * sqrt(T)),
    where G bounds ||grad f|| on the ball and r bounds the iterate rank.
    Scales as 1/sqrt(T).
    """
    vals = dict(probe_width=probe_width, radius=radius, n=n, grad_bound=grad_bound,
                rank_bound=rank_bound, total_iters=total_iters, balance=balance)
    for name, v in vals.items():
        if not v > 0:
            raise InvalidArgumentError(f"{name} must be positive, got {v}")
    if reg_weight < 0:
        raise InvalidArgumentError(f"reg_weight must be >= 0, got {reg_weight}")
    return (balance * math.sqrt(probe_width) * radius) / (
        math.sqrt(n) * (grad_bound + reg_weight * math.sqrt(rank_bound)) * math.sqrt(total_iters)
    )


@dataclass
class SolverState:
    """Mutable per-run state handed to iteration callbacks."""

    X: CompactSVD
    t: int
    best_objective: float
    best_X: CompactSVD
    step: float
    radius: float
    reg_weight: float
    rank_cap: int | None
    probe_width: int


def _step_schedule(step_sizes):
    if callable(step_sizes):
        return step_sizes
    if np.isscalar(step_sizes):
        return lambda t: float(step_sizes)
    seq = np.asarray(step_sizes, dtype=np.float64)
    return lambda t: float(seq[t])


def ssgd_minimize(
    loss: SumLoss,
    reg_weight: float,
    total_iters: int,
    step_sizes,
    probe_width: int,
    radius: float,
    rng: np.random.Generator,
    probe_kind: str = "column_sampling",
    rank_cap: int | None = None,
    distinct_columns: bool = False,
    single_probe_scale: bool = False,
    eval_every: int = 1,
    callback=None,
) -> CompactSVD:
    """Projected stochastic subgradient descent from the zero matrix.

    Runs ``total_iters`` probe steps and returns the iterate with the best
    objective among those evaluated (every ``eval_every`` iterations, plus
    the start and the final iterate). ``step_sizes`` may be a constant, a
    sequence, or a callable of the iteration index. With ``rank_cap=None``
    the rank constraint is inactive (capped only by min(m, n)).
    """
    if total_iters < 0:
        raise InvalidArgumentError(f"iteration count must be >= 0, got {total_iters}")
    if eval_every < 1:
        raise InvalidArgumentError(f"eval_every must be >= 1, got {eval_every}")
    m, n = loss.shape
    schedule = _step_schedule(step_sizes)

    X = CompactSVD.zero(m, n)
    state = SolverState(
        X=X,
        t=0,
        best_objective=objective(X, loss, reg_weight),
        best_X=X,
        step=0.0,
        radius=radius,
        reg_weight=reg_weight,
        rank_cap=rank_cap,
        probe_width=probe_width,
    )
    for t in range(total_iters):
        probe = sample_probe(probe_kind, n, probe_width, rng, distinct=distinct_columns)
        S = subgradient_probe(X, loss, reg_weight, probe)
        step = schedule(t)
        X = incremental_update(
            X, S, probe, step, rank_cap, radius, single_probe_scale=single_probe_scale
        )
        state.X, state.t, state.step = X, t + 1, step
        if (t + 1) % eval_every == 0 or t + 1 == total_iters:
            F = objective(X, loss, reg_weight)
            if F < state.best_objective:
                state.best_objective = F
                state.best_X = X
        if callback is not None:
            callback(state)
    return state.best_X


def prox_gradient_solve(
    Z_dense: np.ndarray,
    weight: float,
    reg: float,
    tol: float = 1e-8,
    mask: np.ndarray | None = None,
    max_iters: int = 100000,
) -> np.ndarray:
    """Dense proximal-gradient reference for the squared-loss problem.

    Minimizes weight * ||P(X - Z)||_F^2 + reg * ||X||_* by full-SVD
    soft-thresholding steps (P masks to observed cells; identity when
    ``mask`` is None). Iterates until the relative objective change drops
    below ``tol``. Test oracle for desk-scale problems only.
    """
    Z = np.asarray(Z_dense, dtype=np.float64)
    if weight <= 0:
        raise InvalidArgumentError(f"weight must be positive, got {weight}")
    if reg < 0:
        raise InvalidArgumentError(f"reg must be >= 0, got {reg}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != Z.shape:
            raise InvalidArgumentError("mask shape must match Z")

    step = 1.0 / (2.0 * weight)

    def F(X, nuclear):
        R = X - Z
        if mask is not None:
            R = R * mask
        return weight * float(np.sum(R * R)) + reg * nuclear

    X = np.zeros_like(Z)
    prev = F(X, 0.0)
    for _ in range(max_iters):
        G = 2.0 * weight * (X - Z)
        if mask is not None:
            G = G * mask
        U, s, Vt = np.linalg.svd(X - step * G, full_matrices=False)
        s = np.maximum(s - step * reg, 0.0)
        X = (U * s) @ Vt
        cur = F(X, float(np.sum(s)))
        if abs(prev - cur) <= tol * max(1.0, abs(prev)):
            return X
        prev = cur
    raise NumericalFailureError(
        f"proximal gradient did not converge in {max_iters} iterations",
        iterations=max_iters,
    )
