"""Observation storage, ratings-file ingestion, and synthetic problems.

Indices are 0-based throughout the library; external IDs from ratings files
are remapped to dense internal indices through an :class:`IdMap` and only
ever resurface through it.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError, InvalidArgumentError
from .linalg import CompactSVD, reduced_qr, small_svd

__all__ = [
    "SparseObservations",
    "IdMap",
    "load_ratings",
    "save_ratings",
    "gen_synthetic",
]


class SparseObservations:
    """An index set with values over an m-by-n grid, stored column-major.

    Entries are kept sorted by (column, row), with column offsets for
    O(nnz_col) column access and a row-sorted permutation for row access.
    Immutable after construction; duplicate (row, col) pairs are rejected.
    """

    def __init__(self, m: int, n: int, rows, cols, values):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if m < 1 or n < 1:
            raise InvalidArgumentError(f"grid must be at least 1 x 1, got {m} x {n}")
        if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
            raise InvalidArgumentError("rows, cols, values must be equal-length 1-d arrays")
        if rows.size == 0:
            raise InvalidArgumentError("observation set must be nonempty")
        if rows.min() < 0 or rows.max() >= m or cols.min() < 0 or cols.max() >= n:
            raise InvalidArgumentError("entry index out of range")
        if not np.all(np.isfinite(values)):
            raise DataError("observation values must be finite")

        order = np.lexsort((rows, cols))
        rows, cols, values = rows[order], cols[order], values[order]
        same = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if np.any(same):
            i = int(np.flatnonzero(same)[0])
            raise DataError(f"duplicate observation at row {rows[i]}, col {cols[i]}")

        self.m = int(m)
        self.n = int(n)
        self.rows = rows
        self.cols = cols
        self.values = values
        self.col_ptr = np.searchsorted(cols, np.arange(n + 1))
        self._row_order = np.lexsort((cols, rows))
        self._row_ptr = np.searchsorted(rows[self._row_order], np.arange(m + 1))
        self._csc = None

    @property
    def nnz(self) -> int:
        return self.values.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.m, self.n

    def column(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices and values of column j, sorted by row."""
        lo, hi = self.col_ptr[j], self.col_ptr[j + 1]
        return self.rows[lo:hi], self.values[lo:hi]

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and values of row i, sorted by column."""
        idx = self._row_order[self._row_ptr[i]:self._row_ptr[i + 1]]
        return self.cols[idx], self.values[idx]

    def dense_column(self, j: int) -> np.ndarray:
        out = np.zeros(self.m)
        r, v = self.column(j)
        out[r] = v
        return out

    def to_csc(self) -> sp.csc_matrix:
        if self._csc is None:
            self._csc = sp.csc_matrix(
                (self.values, (self.rows, self.cols)), shape=(self.m, self.n)
            )
        return self._csc

    def densify(self) -> np.ndarray:
        out = np.zeros((self.m, self.n))
        out[self.rows, self.cols] = self.values
        return out

    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def with_values(self, values) -> "SparseObservations":
        """Same index set, different values (e.g. after centering)."""
        return SparseObservations(self.m, self.n, self.rows, self.cols, values)


@dataclass
class IdMap:
    """Bijection between external IDs and dense internal indices."""

    row_ids: list = field(default_factory=list)
    col_ids: list = field(default_factory=list)

    def __post_init__(self):
        self._row_index = {ext: i for i, ext in enumerate(self.row_ids)}
        self._col_index = {ext: j for j, ext in enumerate(self.col_ids)}

    def row_index(self, ext_id: str):
        return self._row_index.get(ext_id)

    def col_index(self, ext_id: str):
        return self._col_index.get(ext_id)

    def intern_row(self, ext_id: str) -> int:
        i = self._row_index.get(ext_id)
        if i is None:
            i = len(self.row_ids)
            self.row_ids.append(ext_id)
            self._row_index[ext_id] = i
        return i

    def intern_col(self, ext_id: str) -> int:
        j = self._col_index.get(ext_id)
        if j is None:
            j = len(self.col_ids)
            self.col_ids.append(ext_id)
            self._col_index[ext_id] = j
        return j

    @classmethod
    def identity(cls, m: int, n: int) -> "IdMap":
        """1-based consecutive external IDs, as written by the generator."""
        return cls([str(i + 1) for i in range(m)], [str(j + 1) for j in range(n)])


def _detect_separator(line: str):
    # precedence: '::', tab, comma, then any whitespace
    if "::" in line:
        return "::"
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None


def load_ratings(source, dedupe: str = "error") -> tuple[SparseObservations, IdMap]:
    """Parse "user<sep>item<sep>rating" lines into observations.

    ``source`` is a text stream, a filesystem path, or the text itself (a
    string is treated as inline text when it contains a newline, as a path
    otherwise). The separator
    (tab, comma, '::', or whitespace) is auto-detected from the first data
    line; blank lines and '#' comments are skipped; a trailing fourth field
    (timestamp) is ignored. Duplicate (user, item) pairs raise a
    :class:`DataError` unless ``dedupe="last"``.
    """
    if dedupe not in ("error", "last"):
        raise InvalidArgumentError(f"dedupe must be 'error' or 'last', got {dedupe!r}")

    if isinstance(source, str) and "\n" not in source:
        stream = open(source, "r", encoding="utf-8")
        close = True
    elif isinstance(source, str):
        stream = io.StringIO(source)
        close = False
    else:
        stream = source
        close = False

    idmap = IdMap()
    rows, cols, vals = [], [], []
    seen: dict[tuple[int, int], int] = {}
    sep = "unset"
    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if sep == "unset":
                sep = _detect_separator(line)
            fields = line.split(sep) if sep is not None else line.split()
            fields = [f.strip() for f in fields]
            if len(fields) not in (3, 4) or any(f == "" for f in fields[:3]):
                raise DataError(f"line {lineno}: expected 'user item rating', got {line!r}")
            try:
                value = float(fields[2])
            except ValueError:
                raise DataError(f"line {lineno}: rating {fields[2]!r} is not a number") from None
            if not math.isfinite(value):
                raise DataError(f"line {lineno}: rating must be finite")
            i = idmap.intern_row(fields[0])
            j = idmap.intern_col(fields[1])
            key = (i, j)
            if key in seen:
                if dedupe == "error":
                    raise DataError(
                        f"line {lineno}: duplicate rating for user {fields[0]!r}, "
                        f"item {fields[1]!r}"
                    )
                vals[seen[key]] = value
                continue
            seen[key] = len(vals)
            rows.append(i)
            cols.append(j)
            vals.append(value)
    finally:
        if close:
            stream.close()

    if not vals:
        raise DataError("no ratings found in input")
    obs = SparseObservations(len(idmap.row_ids), len(idmap.col_ids), rows, cols, vals)
    return obs, idmap


def save_ratings(obs: SparseObservations, sink, idmap: IdMap | None = None) -> None:
    """Write observations in the canonical tab-separated text format.

    Lines are ordered by external (user, item) ID so the serialization is
    independent of internal index assignment (reloading and re-saving is a
    byte-level fixpoint); values use repr-precision so a reload reproduces
    them exactly.
    """
    if idmap is None:
        idmap = IdMap.identity(obs.m, obs.n)
    if isinstance(sink, str):
        with open(sink, "w", encoding="utf-8") as f:
            save_ratings(obs, f, idmap)
        return
    lines = sorted(
        (idmap.row_ids[i], idmap.col_ids[j], v)
        for i, j, v in zip(obs.rows, obs.cols, obs.values)
    )
    for u, it, v in lines:
        sink.write(f"{u}\t{it}\t{v:.17g}\n")


def gen_synthetic(
    m: int,
    n: int,
    true_rank: int,
    density: float,
    noise_std: float,
    seed: int,
) -> tuple[SparseObservations, SparseObservations, CompactSVD]:
    """Random low-rank completion problem with an 80/20 train/test split.

    The ground truth is a product of standard-normal factors rescaled so the
    root-mean-square entry is 1. A uniform sample of ceil(density*m*n)
    distinct cells is observed with additive Gaussian noise of ``noise_std``.
    """
    if not 0 < density <= 1:
        raise InvalidArgumentError(f"density must be in (0, 1], got {density}")
    if not 1 <= true_rank <= min(m, n):
        raise InvalidArgumentError(f"true_rank {true_rank} out of range for {m} x {n}")
    total = math.ceil(density * m * n)
    if total < 10:
        raise InvalidArgumentError("density * m * n must be at least 10 for an 80/20 split")

    rng = np.random.Generator(np.random.PCG64(seed))
    A = rng.standard_normal((m, true_rank))
    B = rng.standard_normal((n, true_rank))

    # Compact SVD of A @ B.T without forming the m x n product.
    QA, RA = reduced_qr(A)
    QB, RB = reduced_qr(B)
    M, s, N = small_svd(RA @ RB.T)
    scale = math.sqrt(m * n) / float(np.linalg.norm(s))
    truth = CompactSVD(QA @ M, s * scale, QB @ N)

    cells = rng.choice(m * n, size=total, replace=False)
    rows, cols = cells // n, cells % n
    clean = np.einsum("er,r,er->e", truth.U[rows], truth.sigma, truth.V[cols])
    noisy = clean + (rng.normal(0.0, noise_std, size=total) if noise_std > 0 else 0.0)

    n_train = total - max(1, total // 5)
    train = SparseObservations(m, n, rows[:n_train], cols[:n_train], noisy[:n_train])
    test = SparseObservations(m, n, rows[n_train:], cols[n_train:], noisy[n_train:])
    return train, test, truth
