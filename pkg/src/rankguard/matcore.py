"""Dense matrix helpers: validation, CSV I/O, SVD with a fixed sign convention,
and the rank-truncated pseudoinverse used by the block predictors."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyInput,
    ParseError,
    RankOutOfRange,
    ShapeError,
    SingularValueUnderflow,
)

PINV_FLOOR = 1e-12


@dataclass(frozen=True)
class SvdTriplets:
    """Top singular triplets: ``values`` (r,), ``left`` (n, r), ``right`` (p, r)."""

    values: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.values)

    def reconstruct(self, r=None) -> np.ndarray:
        r = self.rank if r is None else r
        return (self.left[:, :r] * self.values[:r]) @ self.right[:, :r].T

    @classmethod
    def empty(cls, n, p):
        return cls(np.zeros(0), np.zeros((n, 0)), np.zeros((p, 0)))


@dataclass(frozen=True)
class BlockPartition:
    """Row and column index sets (0-based) picking out a holdout block."""

    rows: tuple
    cols: tuple

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(int(i) for i in self.rows))
        object.__setattr__(self, "cols", tuple(int(j) for j in self.cols))
        for name, idx in (("rows", self.rows), ("cols", self.cols)):
            if not idx:
                raise ShapeError(f"partition {name} is empty")
            if len(set(idx)) != len(idx):
                raise ShapeError(f"partition {name} has duplicates")
            if min(idx) < 0:
                raise ShapeError(f"partition {name} has negative indices")

    def check(self, shape):
        n, p = shape
        if max(self.rows) >= n or max(self.cols) >= p:
            raise ShapeError(f"partition out of range for a {n}x{p} matrix")
        if len(self.rows) >= n or len(self.cols) >= p:
            raise ShapeError("partition leaves an empty complement")

    def complement(self, shape):
        n, p = shape
        rows = set(self.rows)
        cols = set(self.cols)
        return (
            np.array([i for i in range(n) if i not in rows], dtype=int),
            np.array([j for j in range(p) if j not in cols], dtype=int),
        )


def as_matrix(X) -> np.ndarray:
    """Coerce to a finite 2-D float64 array with at least one row and column."""
    A = np.asarray(X, dtype=float)
    if A.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={A.ndim}")
    if A.shape[0] < 1 or A.shape[1] < 1:
        raise EmptyInput("matrix has no rows or no columns")
    if not np.all(np.isfinite(A)):
        raise ParseError("matrix contains NaN or Inf")
    return A


def load_csv(path, has_header=False) -> np.ndarray:
    """Read a comma-separated numeric matrix. Errors carry 1-based line numbers."""
    rows = []
    width = None
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, record in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not record or all(not c.strip() for c in record):
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise ParseError(
                    f"row {lineno}: expected {width} cells, found {len(record)}",
                    row=lineno,
                )
            parsed = []
            for j, cell in enumerate(record, start=1):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"row {lineno}, column {j}: cannot parse {cell!r}",
                        row=lineno,
                        cell=(lineno, j),
                    ) from None
                if not np.isfinite(value):
                    raise ParseError(
                        f"row {lineno}, column {j}: non-finite value",
                        row=lineno,
                        cell=(lineno, j),
                    )
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise EmptyInput(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def save_csv(path, X, header=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        for row in X:
            writer.writerow([repr(float(x)) for x in row])


def fix_signs(U, V):
    """Flip each pair so the largest-magnitude entry of the left vector is >= 0."""
    U = U.copy()
    V = V.copy()
    for k in range(U.shape[1]):
        i = np.argmax(np.abs(U[:, k]))
        if U[i, k] < 0:
            U[:, k] = -U[:, k]
            V[:, k] = -V[:, k]
    return U, V


def classical_svd(X, r) -> SvdTriplets:
    """Top-``r`` singular triplets of ``X`` (LAPACK divide and conquer)."""
    X = as_matrix(X)
    n, p = X.shape
    if not 0 <= r <= min(n, p):
        raise RankOutOfRange(f"rank {r} outside [0, {min(n, p)}]")
    if r == 0:
        return SvdTriplets.empty(n, p)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    U, V = fix_signs(U[:, :r], Vt[:r].T)
    return SvdTriplets(s[:r].copy(), U, V)


def partial_pinv(X, r) -> np.ndarray:
    """Rank-``r`` truncated pseudoinverse, shape (p, n).

    ``X @ partial_pinv(X, r) @ X`` equals the best rank-``r`` approximation of X.
    """
    X = as_matrix(X)
    n, p = X.shape
    if r == 0:
        return np.zeros((p, n))
    t = classical_svd(X, r)
    if t.values[-1] < PINV_FLOOR:
        raise SingularValueUnderflow(
            f"singular value {r} is {t.values[-1]:.3g}, below {PINV_FLOOR}"
        )
    return (t.right / t.values) @ t.left.T


def frobenius(X) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(X, dtype=float)))))
