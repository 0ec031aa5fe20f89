"""End-to-end matrix completion: centering, parameter heuristics, the
training loop in super-iterations, prediction, evaluation, and model files.

The trainer solves  min weight * ||P(X) - Z||_F^2 + reg * ||X||_*  (or the
absolute / smoothed-hinge variants) with four user-facing knobs: the rank
cap r, the super-iteration count s (one super-iteration = ceil(n/r) probe
steps), and the dimensionless regularization and step parameters delta and
nu. Everything else is derived from the data so that the knobs are scale
free: weight = 1/||Z||_F^2, reg balances delta times the warm-start loss
against the warm-start nuclear norm, the ball radius is the objective-based
bound reg^-1 * weight * ||Z||_F^2, and the step is nu * ||Z||_F^2.
"""

from __future__ import annotations

import hashlib
import math
import struct
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .data import SparseObservations
from .errors import DataError, FormatError, InvalidArgumentError
from .linalg import CompactSVD, tsvd_sparse
from .losses import LOSS_KINDS, SquaredLoss, make_loss, observed_values
from .probing import PROBE_KINDS, make_rng, sample_probe
from .solver import incremental_update, objective, subgradient_probe

__all__ = [
    "CompletionConfig",
    "DerivedParams",
    "CompletionModel",
    "MetricsRecord",
    "preprocess_center",
    "init_params",
    "train",
    "predict",
    "rmse",
    "save_model",
    "load_model",
]


@dataclass
class CompletionConfig:
    """User-facing training parameters; everything else is derived."""

    rank: int
    super_iters: int
    delta: float = 0.015
    nu: float = 0.005
    probe_width: int | None = None      # None: same as rank
    probe_kind: str = "column_sampling"
    loss: str = "squared"
    masked: bool = True
    seed: int = 0
    metrics_every: int = 1              # cadence, in super-iterations
    return_best: bool = False           # best-objective checkpoint vs final iterate
    single_probe_scale: bool = False

    @property
    def k(self) -> int:
        return self.rank if self.probe_width is None else self.probe_width

    def validate(self, n: int) -> None:
        if self.rank < 1:
            raise InvalidArgumentError(f"rank must be >= 1, got {self.rank}")
        if self.super_iters < 0:
            raise InvalidArgumentError(f"super_iters must be >= 0, got {self.super_iters}")
        if not self.delta > 0:
            raise InvalidArgumentError(f"delta must be positive, got {self.delta}")
        if not self.nu > 0:
            raise InvalidArgumentError(f"nu must be positive, got {self.nu}")
        if not 1 <= self.k <= n:
            raise InvalidArgumentError(f"probe width {self.k} must be in [1, {n}]")
        if self.probe_kind not in PROBE_KINDS:
            raise InvalidArgumentError(f"unknown probe kind {self.probe_kind!r}")
        if self.loss not in LOSS_KINDS:
            raise InvalidArgumentError(f"unknown loss kind {self.loss!r}")
        if self.metrics_every < 1:
            raise InvalidArgumentError(f"metrics_every must be >= 1, got {self.metrics_every}")


@dataclass(frozen=True)
class DerivedParams:
    alpha: float      # loss weight, 1/||Z||_F^2
    beta_reg: float   # nuclear-norm weight
    radius: float     # Frobenius-ball radius
    step_size: float  # fixed SSGD step


@dataclass(frozen=True)
class CompletionModel:
    """A trained completion model: low-rank factors plus centering means."""

    factors: CompactSVD
    row_means: np.ndarray
    col_means: np.ndarray
    global_mean: float

    @property
    def dims(self) -> tuple[int, int]:
        return self.factors.shape


@dataclass(frozen=True)
class MetricsRecord:
    super_iteration: int
    iteration: int
    wall_seconds: float
    objective: float
    train_rmse: float
    test_rmse: float | None = None


def preprocess_center(
    train: SparseObservations, test: SparseObservations | None = None
):
    """Subtract (row mean + column mean)/2 of the training ratings.

    Means come from the training set only; rows or columns with no training
    entries fall back to the global training mean (and keep that value in
    the returned mean vectors, so prediction needs no special casing).
    Returns (centered_train, centered_test_or_None, row_means, col_means,
    global_mean).
    """
    m, n = train.shape
    if test is not None and test.shape != train.shape:
        raise InvalidArgumentError(
            f"test grid {test.shape} does not match train grid {train.shape}"
        )
    global_mean = float(train.values.mean())
    row_cnt = np.bincount(train.rows, minlength=m)
    col_cnt = np.bincount(train.cols, minlength=n)
    row_sum = np.bincount(train.rows, weights=train.values, minlength=m)
    col_sum = np.bincount(train.cols, weights=train.values, minlength=n)
    row_means = np.where(row_cnt > 0, row_sum / np.maximum(row_cnt, 1), global_mean)
    col_means = np.where(col_cnt > 0, col_sum / np.maximum(col_cnt, 1), global_mean)

    def center(obs):
        offs = 0.5 * (row_means[obs.rows] + col_means[obs.cols])
        return obs.with_values(obs.values - offs)

    return center(train), center(test) if test is not None else None, \
        row_means, col_means, global_mean


def init_params(
    Z: SparseObservations,
    rank: int,
    delta: float,
    nu: float,
    masked: bool = True,
    seed: int = 0,
) -> tuple[DerivedParams, CompactSVD]:
    """Warm start and derived solver parameters.

    The warm start is the rank-r truncated SVD of Z. The loss weight is
    1/||Z||_F^2; the nuclear weight is chosen so that at the warm start the
    regularizer equals delta times the loss; the ball radius bounds the
    optimum via the objective at zero; the step is nu * ||Z||_F^2. A warm
    start that already fits Z exactly (or a zero Z) leaves the heuristics
    undefined and raises.
    """
    frob2 = Z.frobenius_norm() ** 2
    if frob2 == 0.0:
        raise InvalidArgumentError("degenerate input: Z is identically zero")
    X0 = tsvd_sparse(Z, rank, seed=seed)
    if X0.rank == 0:
        raise InvalidArgumentError("degenerate input: Z is (numerically) zero")
    alpha = 1.0 / frob2
    warm_loss = SquaredLoss(Z, weight=alpha, masked=masked).total_value(X0)
    nuclear0 = X0.nuclear_norm()
    # warm_loss is the fraction of observed energy the warm start misses;
    # at numerical-zero levels the regularization heuristic is undefined.
    if warm_loss <= 1e-12:
        raise InvalidArgumentError(
            "degenerate input: the warm start fits Z (numerically) exactly, "
            "so the regularization heuristic vanishes; lower the rank or "
            "set the nuclear weight by hand"
        )
    beta_reg = delta * warm_loss / nuclear0
    radius = alpha * frob2 / beta_reg
    return DerivedParams(alpha, beta_reg, radius, nu * frob2), X0


def _raw_rmse(factors: CompactSVD, row_means, col_means, obs: SparseObservations) -> float:
    preds = observed_values(factors, obs) + 0.5 * (
        row_means[obs.rows] + col_means[obs.cols]
    )
    return float(np.sqrt(np.mean((preds - obs.values) ** 2)))


def train(
    train_obs: SparseObservations,
    config: CompletionConfig,
    metrics_sink=None,
    test_obs: SparseObservations | None = None,
    center: bool = True,
    clock=None,
) -> CompletionModel:
    """Run the completion solver for s super-iterations.

    Emits a :class:`MetricsRecord` to ``metrics_sink`` at the warm start and
    after every ``metrics_every``-th super-iteration (and the last); sink
    exceptions are demoted to warnings. ``center=False`` skips mean
    centering (the model then carries zero means). RMSE metrics are always
    on the raw rating scale.
    """
    m, n = train_obs.shape
    config.validate(n)
    if clock is None:
        clock = time.perf_counter

    if center:
        # metrics are raw-scale, so the centered test set is not needed here
        ctrain, _, row_means, col_means, global_mean = preprocess_center(
            train_obs, test_obs
        )
    else:
        if test_obs is not None and test_obs.shape != train_obs.shape:
            raise InvalidArgumentError(
                f"test grid {test_obs.shape} does not match train grid {train_obs.shape}"
            )
        ctrain = train_obs
        row_means, col_means = np.zeros(m), np.zeros(n)
        global_mean = 0.0

    params, X0 = init_params(
        ctrain, config.rank, config.delta, config.nu,
        masked=config.masked, seed=config.seed,
    )
    loss = make_loss(config.loss, ctrain, weight=params.alpha, masked=config.masked)
    rng = make_rng(config.seed)

    per_super = math.ceil(n / config.rank)
    start = clock()

    def emit(si: int, it: int, X: CompactSVD) -> float:
        F = objective(X, loss, params.beta_reg)
        if metrics_sink is not None:
            rec = MetricsRecord(
                super_iteration=si,
                iteration=it,
                wall_seconds=clock() - start,
                objective=F,
                train_rmse=_raw_rmse(X, row_means, col_means, train_obs),
                test_rmse=_raw_rmse(X, row_means, col_means, test_obs)
                if test_obs is not None else None,
            )
            try:
                metrics_sink(rec)
            except Exception as exc:  # sink trouble must not kill a run
                warnings.warn(f"metrics sink failed: {exc}", stacklevel=2)
        return F

    X = X0
    best_X, best_F = X, emit(0, 0, X)
    it = 0
    for si in range(1, config.super_iters + 1):
        for _ in range(per_super):
            probe = sample_probe(config.probe_kind, n, config.k, rng)
            S = subgradient_probe(X, loss, params.beta_reg, probe)
            X = incremental_update(
                X, S, probe, params.step_size, config.rank, params.radius,
                single_probe_scale=config.single_probe_scale,
            )
            it += 1
        if si % config.metrics_every == 0 or si == config.super_iters:
            F = emit(si, it, X)
            if F < best_F:
                best_F, best_X = F, X

    final = best_X if config.return_best else X
    return CompletionModel(final, row_means, col_means, global_mean)


def predict(model: CompletionModel, i: int, j: int) -> float:
    """Predicted raw-scale value at (i, j), in O(rank) time."""
    m, n = model.dims
    if not (0 <= i < m and 0 <= j < n):
        raise InvalidArgumentError(f"index ({i}, {j}) out of range for {m} x {n}")
    return model.factors.entry(i, j) + 0.5 * (
        float(model.row_means[i]) + float(model.col_means[j])
    )


def rmse(model: CompletionModel, test: SparseObservations) -> float:
    """Root-mean-square prediction error over a raw-scale test set."""
    if test.shape != model.dims:
        raise InvalidArgumentError(
            f"test grid {test.shape} does not match model dims {model.dims}"
        )
    return _raw_rmse(model.factors, model.row_means, model.col_means, test)


# --- model persistence ------------------------------------------------------
#
# Layout (all little-endian): 8-byte magic, three uint64 (m, n, r), then
# float64 payload U (m*r, row-major), sigma (r), V (n*r, row-major),
# row_means (m), col_means (n), global_mean, then a uint64 checksum (first
# 8 bytes of the SHA-256 of everything before it).

MODEL_MAGIC = b"NNSVD1\x00\x00"


def _checksum(blob: bytes) -> int:
    return struct.unpack("<Q", hashlib.sha256(blob).digest()[:8])[0]


def save_model(model: CompletionModel, sink) -> None:
    """Write the model in the binary format (bit-exact round trip)."""
    if isinstance(sink, str):
        with open(sink, "wb") as f:
            save_model(model, f)
        return
    m, n = model.dims
    r = model.factors.rank
    parts = [MODEL_MAGIC, struct.pack("<3Q", m, n, r)]
    for arr in (
        model.factors.U,
        model.factors.sigma,
        model.factors.V,
        model.row_means,
        model.col_means,
        np.float64(model.global_mean),
    ):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(parts)
    sink.write(blob)
    sink.write(struct.pack("<Q", _checksum(blob)))


def load_model(source) -> CompletionModel:
    """Read a model file, verifying structure and checksum."""
    if isinstance(source, str):
        with open(source, "rb") as f:
            return load_model(f)
    blob = source.read()
    if len(blob) < len(MODEL_MAGIC) + 24 + 8:
        raise FormatError(f"model file too short ({len(blob)} bytes)")
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("bad magic: not a model file")
    m, n, r = struct.unpack_from("<3Q", blob, len(MODEL_MAGIC))
    n_floats = m * r + r + n * r + m + n + 1
    expected = len(MODEL_MAGIC) + 24 + 8 * n_floats + 8
    if len(blob) != expected:
        raise FormatError(
            f"truncated or oversized model file: expected {expected} bytes "
            f"for dims {m} x {n} rank {r}, got {len(blob)}"
        )
    (stored,) = struct.unpack_from("<Q", blob, expected - 8)
    if stored != _checksum(blob[:-8]):
        raise FormatError("checksum mismatch: model file is corrupt")
    floats = np.frombuffer(blob, dtype="<f8", count=n_floats,
                           offset=len(MODEL_MAGIC) + 24)
    if not np.all(np.isfinite(floats)):
        raise DataError("model payload contains non-finite values")
    pos = 0

    def take(count, shape):
        nonlocal pos
        out = floats[pos:pos + count].reshape(shape).astype(np.float64)
        pos += count
        return out

    U = take(m * r, (m, r))
    sigma = take(r, (r,))
    V = take(n * r, (n, r))
    row_means = take(m, (m,))
    col_means = take(n, (n,))
    global_mean = float(floats[pos])
    return CompletionModel(CompactSVD(U, sigma, V), row_means, col_means, global_mean)
