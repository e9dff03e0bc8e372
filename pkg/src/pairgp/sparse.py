"""Sparse symmetric positive-definite matrices and their Cholesky factors.

Storage is the lower triangle in CSC form.  Factorization is delegated to
CHOLMOD (through cvxopt) with an AMD fill-reducing ordering computed here, so
the permutation is known and deterministic: ``L @ L.T == A[p][:, p]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
from cvxopt import amd, cholmod, matrix, spmatrix

# A supernodal factor is required for cholmod.diag; postordering would make
# the effective permutation differ from the one we pass in.
_CHOLMOD_OPTIONS = {"supernodal": 2, "postorder": False}


class NotPositiveDefiniteError(ArithmeticError):
    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (failed at pivot {pivot})")
        self.pivot = pivot


@dataclass(frozen=True, eq=False)
class SparseSym:
    """Symmetric matrix; ``lower`` holds the lower triangle including the diagonal."""

    lower: sp.csc_matrix

    @property
    def order(self) -> int:
        return self.lower.shape[0]

    @property
    def nnz(self) -> int:
        """Structural nonzeros of the full symmetric matrix."""
        diag = int(np.count_nonzero(self.lower.indices == np.repeat(np.arange(self.order), np.diff(self.lower.indptr))))
        return 2 * self.lower.nnz - diag

    def full(self) -> sp.csc_matrix:
        strict = sp.tril(self.lower, k=-1)
        return (self.lower + strict.T).tocsc()

    def toarray(self) -> np.ndarray:
        return self.full().toarray()

    def dot(self, x: np.ndarray) -> np.ndarray:
        return self.full() @ x

    def to_matrix_market(self, path) -> None:
        scipy.io.mmwrite(str(path), self.full(), symmetry="symmetric")


def assemble(order: int, rows, cols, values) -> SparseSym:
    """Build a symmetric matrix from coordinate triples, summing duplicates.

    Upper-triangle triples are mirrored into the lower triangle, so passing
    both ``(i, j, v)`` and ``(j, i, v)`` stores ``2v`` at ``(i, j)``; callers
    that hold a full symmetric pattern should pass only one triangle.
    """
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    values = np.asarray(values, dtype=float).ravel()
    if not (len(rows) == len(cols) == len(values)):
        raise ValueError("rows, cols and values must have equal length")
    if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= order or cols.max() >= order):
        raise IndexError(f"triple index outside matrix of order {order}")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value in triples")
    lo = np.maximum(rows, cols)
    hi = np.minimum(rows, cols)
    m = sp.csc_matrix((values, (lo, hi)), shape=(order, order))
    m.sum_duplicates()
    m.sort_indices()
    return SparseSym(m)


def from_full(m) -> SparseSym:
    """Wrap a full symmetric (dense or sparse) matrix, keeping its lower triangle."""
    lower = sp.tril(sp.csc_matrix(m)).tocsc()
    lower.sort_indices()
    return SparseSym(lower)


def _to_cvxopt(m: SparseSym) -> spmatrix:
    coo = m.lower.tocoo()
    n = m.order
    return spmatrix(
        matrix(coo.data.astype(float)),
        matrix(coo.row.astype(np.int64)),
        matrix(coo.col.astype(np.int64)),
        (n, n),
    )


@dataclass(frozen=True, eq=False)
class Analysis:
    """Fill-reducing ordering, reusable for any matrix with the same pattern."""

    permutation: np.ndarray
    pattern_key: tuple


def _pattern_key(m: SparseSym) -> tuple:
    return (m.order, m.lower.indptr.tobytes(), m.lower.indices.tobytes())


def analyze(m: SparseSym) -> Analysis:
    if m.order == 0:
        return Analysis(np.zeros(0, dtype=np.int64), _pattern_key(m))
    perm = amd.order(_to_cvxopt(m))
    return Analysis(np.array(perm, dtype=np.int64).ravel(), _pattern_key(m))


@dataclass(frozen=True, eq=False)
class CholFactor:
    """``A[p][:, p] = L @ L.T`` for the permutation ``p``."""

    permutation: np.ndarray
    order: int
    _numeric: object = field(repr=False)
    _log_diag_sum: float
    _source: object = field(default=None, repr=False)

    @property
    def factor(self) -> sp.csc_matrix:
        """Explicit lower-triangular factor in permuted order."""
        if self.order == 0:
            return sp.csc_matrix((0, 0))
        # getfactor converts its argument in place, so extract from a private copy.
        cholmod.options.update(_CHOLMOD_OPTIONS)
        copy = cholmod.symbolic(self._source, p=matrix(self.permutation.astype(np.int64)))
        cholmod.numeric(self._source, copy)
        lf = cholmod.getfactor(copy)
        rows = np.array(lf.I, dtype=np.int64).ravel()
        cols = np.array(lf.J, dtype=np.int64).ravel()
        vals = np.array(lf.V, dtype=float).ravel()
        return sp.csc_matrix((vals, (rows, cols)), shape=(self.order, self.order))

    @property
    def nnz(self) -> int:
        return self.factor.nnz

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve(self, rhs)

    def log_det(self) -> float:
        return log_det(self)


def cholesky(m: SparseSym, analysis: Analysis | None = None) -> CholFactor:
    """Factor ``m``; pass a previous :func:`analyze` result to skip the ordering step."""
    if m.order == 0:
        return CholFactor(np.zeros(0, dtype=np.int64), 0, None, 0.0)
    if analysis is None or analysis.pattern_key != _pattern_key(m):
        analysis = analyze(m)
    cm = _to_cvxopt(m)
    cholmod.options.update(_CHOLMOD_OPTIONS)
    numeric = cholmod.symbolic(cm, p=matrix(analysis.permutation.astype(np.int64)))
    try:
        cholmod.numeric(cm, numeric)
    except ArithmeticError as exc:
        pivot = int(exc.args[0]) if exc.args and str(exc.args[0]).lstrip("-").isdigit() else -1
        raise NotPositiveDefiniteError(pivot) from None
    diag = np.array(cholmod.diag(numeric)).ravel()
    return CholFactor(analysis.permutation, m.order, numeric, float(np.sum(np.log(diag))), cm)


def solve(f: CholFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``A x = rhs`` for a vector or a matrix of right-hand sides."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != f.order:
        raise ValueError(f"rhs has length {rhs.shape[0]}, factor has order {f.order}")
    if f.order == 0:
        return rhs.copy()
    b = matrix(np.ascontiguousarray(rhs.reshape(f.order, -1), dtype=float).copy())
    cholmod.solve(f._numeric, b)
    out = np.array(b)
    return out.ravel() if rhs.ndim == 1 else out


def log_det(f: CholFactor) -> float:
    return 2.0 * f._log_diag_sum
