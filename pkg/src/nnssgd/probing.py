"""Random probing matrices: n-by-k sketches Y with E[Y @ Y.T] = I.

Three families are provided. Scaled identity columns ("column_sampling")
are the default and the only kind the solver fast-paths: applying such a
probe touches exactly k columns of the probed matrix. Rademacher and
Gaussian probes materialize a dense n-by-k matrix and exist mainly for
estimator diagnostics.

Column sampling draws indices i.i.d. with replacement by default. The
``distinct`` flag switches to sampling without replacement, for which the
second-moment identity E[||A Y Y.T||_F^2] = (n/k) ||A||_F^2 holds exactly;
with replacement (and for the dense kinds) the true constant is larger,
see :func:`expected_second_moment_ratio`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "ProbeMatrix",
    "make_rng",
    "sample_probe",
    "apply_probe_right",
    "probe_step_factors",
    "expected_second_moment_ratio",
    "PROBE_KINDS",
]

PROBE_KINDS = ("column_sampling", "rademacher", "gaussian")


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64): one seed, one stream, all platforms."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class ProbeMatrix:
    """One sampled probe.

    For column_sampling only the sampled indices and the scale sqrt(n/k)
    are stored; the dense kinds carry their (already 1/sqrt(k)-scaled)
    matrix explicitly.
    """

    kind: str
    n: int
    k: int
    indices: np.ndarray | None = None   # (k,), column_sampling only
    matrix: np.ndarray | None = None    # (n, k), dense kinds only

    @property
    def scale(self) -> float:
        return math.sqrt(self.n / self.k)

    def dense(self, scaled: bool = True) -> np.ndarray:
        """Materialize Y as an n-by-k array.

        For column sampling, ``scaled=False`` yields the bare identity
        columns instead of the sqrt(n/k)-scaled ones.
        """
        if self.kind != "column_sampling":
            return self.matrix
        Y = np.zeros((self.n, self.k))
        Y[self.indices, np.arange(self.k)] = self.scale if scaled else 1.0
        return Y

    @classmethod
    def from_columns(cls, n: int, indices) -> "ProbeMatrix":
        """Column-sampling probe with explicit indices (duplicates allowed)."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1 or indices.size == 0:
            raise InvalidArgumentError("indices must be a nonempty 1-d sequence")
        if indices.size > n or indices.min() < 0 or indices.max() >= n:
            raise InvalidArgumentError(f"indices out of range for width {indices.size}, n={n}")
        return cls("column_sampling", n, indices.size, indices=indices)


def sample_probe(
    kind: str,
    n: int,
    k: int,
    rng: np.random.Generator,
    distinct: bool = False,
) -> ProbeMatrix:
    """Draw one probe of the requested kind and width.

    column_sampling indices are i.i.d. uniform on [0, n) with replacement
    unless ``distinct`` is set (then a uniform k-subset without replacement).
    """
    if kind not in PROBE_KINDS:
        raise InvalidArgumentError(f"unknown probe kind {kind!r}")
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"probe width k={k} must satisfy 1 <= k <= n={n}")
    if kind == "column_sampling":
        if distinct:
            idx = rng.choice(n, size=k, replace=False)
        else:
            idx = rng.integers(0, n, size=k)
        return ProbeMatrix(kind, n, k, indices=idx.astype(np.int64))
    if kind == "rademacher":
        Z = rng.integers(0, 2, size=(n, k)).astype(np.float64) * 2.0 - 1.0
    else:
        Z = rng.standard_normal((n, k))
    return ProbeMatrix(kind, n, k, matrix=Z / math.sqrt(k))


def apply_probe_right(column_fn, m: int, probe: ProbeMatrix) -> np.ndarray:
    """A @ Y for an m-by-n matrix A given only column access.

    ``column_fn(j)`` must return column j as an m-vector. Column-sampling
    probes evaluate exactly the k sampled columns; dense probes combine all
    n of them.
    """
    out = np.empty((m, probe.k))
    if probe.kind == "column_sampling":
        for pos, j in enumerate(probe.indices):
            out[:, pos] = column_fn(int(j))
        out *= probe.scale
        return out
    out[:] = 0.0
    for j in range(probe.n):
        col = np.asarray(column_fn(j))
        out += np.outer(col, probe.matrix[j])
    return out


def probe_step_factors(
    S: np.ndarray, probe: ProbeMatrix, single_probe_scale: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Factor pair (S, Y) representing the rank-k step matrix S @ Y.T.

    The product is never materialized at m-by-n size; callers densify the
    returned n-by-k right factor only. With ``single_probe_scale`` the right
    factor keeps bare identity columns, so the densified step carries
    sqrt(n/k) in total; the default carries the full n/k demanded by the
    unbiasedness identity. The single-scale form exists for compatibility
    with solvers written that way.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != probe.k:
        raise InvalidArgumentError(
            f"S must have {probe.k} columns to match the probe, got shape {S.shape}"
        )
    return S, probe.dense(scaled=not single_probe_scale)


def expected_second_moment_ratio(kind: str, n: int, k: int, distinct: bool = False) -> float:
    """Exact value of E[||A Y Y.T||_F^2] / ||A||_F^2 for each family.

    Distinct column sampling achieves n/k exactly; i.i.d. column sampling
    and Rademacher give (n + k - 1)/k, Gaussian (n + k + 1)/k.
    """
    if kind == "column_sampling":
        return n / k if distinct else (n + k - 1) / k
    if kind == "rademacher":
        return (n + k - 1) / k
    if kind == "gaussian":
        return (n + k + 1) / k
    raise InvalidArgumentError(f"unknown probe kind {kind!r}")
