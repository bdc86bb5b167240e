"""CSR sparse matrices and the normalized graph propagation operator.

Everything downstream leans on two properties of this module:

* column indices are strictly increasing within each row, so every product
  accumulates in a fixed order and reruns are bit-identical;
* `build_propagation` produces an exactly symmetric matrix (each entry is
  computed as a_uv * (s_u * s_v), and IEEE multiplication is commutative).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SparseMatrix:
    """Minimal CSR matrix over float64."""

    __slots__ = ("shape", "indptr", "indices", "values")

    def __init__(self, shape, indptr, indices, values, validate=True):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        if validate:
            self._validate()

    def _validate(self):
        rows, cols = self.shape
        if rows < 0 or cols < 0:
            raise ValueError("shape must be nonnegative")
        if self.indptr.shape != (rows + 1,):
            raise ValueError("indptr must have length rows + 1")
        if rows >= 0 and (self.indptr[0] != 0 or self.indptr[-1] != self.indices.size):
            raise ValueError("indptr must run from 0 to nnz")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be nondecreasing")
        if self.indices.size != self.values.size:
            raise ValueError("indices and values must have equal length")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= cols:
                raise ValueError("column index out of range")
        if self.indices.size > 1:
            diff = np.diff(self.indices)
            # Positions where a new row begins are exempt from the ordering check.
            boundary = np.zeros(self.indices.size - 1, dtype=bool)
            starts = self.indptr[1:-1]
            starts = starts[(starts > 0) & (starts < self.indices.size)]
            boundary[starts - 1] = True
            if np.any((diff <= 0) & ~boundary):
                raise ValueError("column indices must be strictly increasing within a row")

    @property
    def nnz(self):
        return int(self.indices.size)

    def row_nnz(self):
        """Number of stored entries per row."""
        return np.diff(self.indptr)

    @classmethod
    def from_coo(cls, shape, rows, cols, values):
        """Build from coordinates; duplicate entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("coordinate arrays must share a shape")
        if rows.size:
            if rows.min() < 0 or rows.max() >= shape[0]:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= shape[1]:
                raise ValueError("column index out of range")
        keys = rows * np.int64(shape[1]) + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        merged = np.bincount(inverse, weights=values, minlength=uniq.size)
        urows = (uniq // shape[1]).astype(np.int64)
        ucols = (uniq % shape[1]).astype(np.int64)
        counts = np.bincount(urows, minlength=shape[0])
        indptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        return cls(shape, indptr, ucols, merged, validate=False)

    @classmethod
    def from_dense(cls, dense, tol=0.0):
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(np.abs(dense) > tol)
        return cls.from_coo(dense.shape, rows, cols, dense[rows, cols])

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls((n, n), np.arange(n + 1), idx, np.ones(n), validate=False)

    def to_dense(self):
        out = np.zeros(self.shape)
        row_of = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[row_of, self.indices] = self.values
        return out

    def transpose(self):
        rows, cols = self.shape
        order = np.argsort(self.indices, kind="stable")
        row_of = np.repeat(np.arange(rows, dtype=np.int64), np.diff(self.indptr))
        counts = np.bincount(self.indices, minlength=cols)
        indptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        return SparseMatrix((cols, rows), indptr, row_of[order], self.values[order],
                            validate=False)

    def row_slice(self, rows):
        """New matrix holding the given rows, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.shape[0]):
            raise ValueError("row index out of range")
        counts = self.indptr[rows + 1] - self.indptr[rows]
        indptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        total = int(indptr[-1])
        take = (np.arange(total, dtype=np.int64)
                - np.repeat(indptr[:-1], counts)
                + np.repeat(self.indptr[rows], counts))
        return SparseMatrix((rows.size, self.shape[1]), indptr,
                            self.indices[take], self.values[take], validate=False)

    def row_sums(self):
        """Per-row sum of stored values, accumulated left to right."""
        out = np.zeros(self.shape[0])
        for r in range(self.shape[0]):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            out[r] = np.sum(self.values[lo:hi])
        return out


def spmm(matrix, dense, counter=None):
    """Sparse @ dense with per-row, left-to-right accumulation."""
    H = np.asarray(dense, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != matrix.shape[1]:
        raise ValueError(
            f"dense operand has shape {H.shape}, expected ({matrix.shape[1]}, d)")
    out = np.zeros((matrix.shape[0], H.shape[1]))
    indptr, indices, values = matrix.indptr, matrix.indices, matrix.values
    for r in range(matrix.shape[0]):
        lo, hi = indptr[r], indptr[r + 1]
        if lo != hi:
            out[r] = values[lo:hi] @ H[indices[lo:hi]]
    if counter is not None:
        counter.record_spmm(matrix.shape[0], matrix.nnz, H.shape[1])
    return out


@dataclass
class PropagationMatrix:
    """Normalized propagation operator plus per-node neighborhood sizes.

    `neighbor_counts[u]` is n(u): the number of stored entries in row u,
    self loop included.
    """

    matrix: SparseMatrix
    neighbor_counts: np.ndarray

    @property
    def num_nodes(self):
        return self.matrix.shape[0]


def build_propagation(adjacency):
    """D^{-1/2} (A + I) D^{-1/2} for a symmetric, hollow adjacency matrix."""
    V = adjacency.shape[0]
    if adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError("adjacency must be square")
    if adjacency.nnz:
        if np.any(adjacency.values < 0):
            raise ValueError("adjacency weights must be nonnegative")
        row_of = np.repeat(np.arange(V), np.diff(adjacency.indptr))
        if np.any(row_of == adjacency.indices):
            raise ValueError("adjacency must have an empty diagonal (no self loops)")
    at = adjacency.transpose()
    if not (np.array_equal(at.indptr, adjacency.indptr)
            and np.array_equal(at.indices, adjacency.indices)
            and np.array_equal(at.values, adjacency.values)):
        raise ValueError("adjacency must be symmetric")

    row_of = np.repeat(np.arange(V), np.diff(adjacency.indptr))
    rows = np.concatenate([row_of, np.arange(V)])
    cols = np.concatenate([adjacency.indices, np.arange(V)])
    vals = np.concatenate([adjacency.values, np.ones(V)])
    tilde = SparseMatrix.from_coo((V, V), rows, cols, vals)

    degrees = tilde.row_sums()
    inv_sqrt = 1.0 / np.sqrt(degrees)
    row_of = np.repeat(np.arange(V), np.diff(tilde.indptr))
    # a_uv * (s_u * s_v): the parenthesized product is order-symmetric, so the
    # result is exactly symmetric entry for entry.
    scaled = tilde.values * (inv_sqrt[row_of] * inv_sqrt[tilde.indices])
    matrix = SparseMatrix(tilde.shape, tilde.indptr, tilde.indices, scaled,
                          validate=False)
    return PropagationMatrix(matrix=matrix, neighbor_counts=tilde.row_nnz())


def row_sums(matrix):
    """Row sums of a sparse matrix (diagnostic; the propagation operator is
    not row-stochastic, unlike a random-walk normalization)."""
    return matrix.row_sums()
