"""Dense, sparse and matrix-free linear algebra primitives.

Dense matrices are plain ``numpy.ndarray`` objects. The sparse interpolation
matrices used by KISS-GP are wrapped in :class:`SparseRowMatrix`, a thin CSR
container whose products are delegated to :mod:`scipy.sparse`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NonSquare,
    NonSymmetric,
    NotPositiveDefinite,
)

log = logging.getLogger(__name__)

#: Relative diagonal jitter tried, in order, when a factorization fails.
JITTER_LADDER = (0.0, 1e-6, 1e-4)
SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class SparseRowMatrix:
    """Compressed sparse row matrix.

    ``row_offsets[i]:row_offsets[i + 1]`` indexes the entries of row ``i`` in
    ``col_indices`` and ``values``.
    """

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        offs = self.row_offsets
        if len(offs) != self.rows + 1 or offs[0] != 0 or np.any(np.diff(offs) < 0):
            raise ValueError("row_offsets must be nondecreasing, start at 0, length rows+1")
        if offs[-1] != len(self.values) or len(self.col_indices) != len(self.values):
            raise ValueError("last row offset must equal the number of stored values")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= self.cols
        ):
            raise ValueError("column index out of range")

    @classmethod
    def from_triplets(cls, rows, cols, row_idx, col_idx, values):
        """Build from COO triplets; duplicate (row, col) pairs are summed."""
        coo = scipy.sparse.coo_array(
            (np.asarray(values, float), (np.asarray(row_idx), np.asarray(col_idx))),
            shape=(rows, cols),
        )
        csr = coo.tocsr()
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(rows, cols, csr.indptr.astype(np.int64), csr.indices.astype(np.int64),
                   csr.data.astype(float))

    @classmethod
    def from_dense(cls, A):
        A = np.asarray(A, float)
        r, c = np.nonzero(A)
        return cls.from_triplets(A.shape[0], A.shape[1], r, c, A[r, c])

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self):
        return len(self.values)

    def to_scipy(self):
        return scipy.sparse.csr_array(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape
        )

    def todense(self):
        return self.to_scipy().toarray()

    def row_nnz(self):
        return np.diff(self.row_offsets)

    def row_sums(self):
        return np.asarray(self.to_scipy().sum(axis=1)).ravel()

    def matvec(self, v):
        return sparse_matvec(self, v)

    def rmatvec(self, v):
        """Product with the transpose, ``W.T @ v``."""
        v = np.asarray(v, float)
        if v.shape[0] != self.rows:
            raise DimensionMismatch(f"expected leading length {self.rows}, got {v.shape[0]}")
        return self.to_scipy().T @ v


@dataclass(frozen=True)
class SymTridiagonal:
    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        if len(self.offdiag) != max(len(self.diag) - 1, 0):
            raise ValueError("offdiag must have length len(diag) - 1")

    @property
    def size(self):
        return len(self.diag)

    def todense(self):
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)

    def eigh(self):
        """Eigenvalues (ascending) and eigenvectors of the tridiagonal matrix."""
        if self.size == 1:
            return self.diag.copy(), np.ones((1, 1))
        return scipy.linalg.eigh_tridiagonal(self.diag, self.offdiag)


def _check_square(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NonSquare(f"expected a square matrix, got shape {A.shape}")
    return A


def _check_symmetric(A, rtol=SYMMETRY_RTOL):
    scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T)) > rtol * scale:
        raise NonSymmetric("matrix is not symmetric to working precision")


def cholesky(A, jitter=True):
    """Lower Cholesky factor ``L`` with ``L @ L.T == A``.

    The factorization is first attempted on ``A`` itself. If that fails and
    ``jitter`` is true, ``1e-6`` and then ``1e-4`` times the mean diagonal is
    added before giving up with :class:`NotPositiveDefinite`.
    """
    A = _check_square(A)
    _check_symmetric(A)
    ladder = JITTER_LADDER if jitter else JITTER_LADDER[:1]
    mean_diag = float(np.mean(np.diag(A))) if A.size else 0.0
    for rel in ladder:
        if rel and mean_diag <= 0:
            break
        M = A + (rel * mean_diag) * np.eye(A.shape[0]) if rel else A
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            continue
        if rel:
            log.debug("cholesky succeeded with relative jitter %g", rel)
        return L
    raise NotPositiveDefinite("matrix is not positive definite after jitter")


def cho_solve(L, B):
    """Solve ``(L L^T) X = B`` given a lower Cholesky factor."""
    Y = scipy.linalg.solve_triangular(L, B, lower=True)
    return scipy.linalg.solve_triangular(L.T, Y, lower=False)


def solve_psd(A, B):
    """Solve ``A X = B`` for symmetric positive definite ``A``."""
    A = _check_square(A)
    B = np.asarray(B, dtype=float)
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"A has {A.shape[0]} rows but B has {B.shape[0]}")
    return cho_solve(cholesky(A), B)


def logdet_from_cholesky(L):
    return 2.0 * np.sum(np.log(np.diag(L)))


def sym_eigen(A):
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Returns ``(values, vectors)`` with ``vectors[:, i]`` paired to ``values[i]``.
    """
    A = _check_square(A)
    _check_symmetric(A)
    try:
        w, V = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(f"eigensolver failed: {exc}") from exc
    return w[::-1].copy(), V[:, ::-1].copy()


def conjugate_gradient(mvm: Callable[[np.ndarray], np.ndarray], b, tol=1e-10, max_iter=1000,
                       x0=None):
    """Solve ``A x = b`` for an SPD operator given only ``v -> A v``.

    Stops once ``||A x - b|| / ||b|| <= tol``; raises :class:`NoConvergence`
    if that has not happened after ``max_iter`` iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - mvm(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = r @ r
    it = 0
    while True:
        res = np.sqrt(rs) / bnorm
        if res <= tol:
            return x
        if it >= max_iter:
            raise NoConvergence(
                f"CG did not reach tol={tol:g} in {max_iter} iterations (residual {res:.3e})",
                iterations=it,
                residual=res,
            )
        Ap = mvm(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise NotPositiveDefinite("operator is not positive definite (p^T A p <= 0)")
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1


@dataclass(frozen=True)
class LanczosResult:
    Q: np.ndarray
    T: SymTridiagonal
    breakdown: bool

    def __iter__(self):
        # allows ``Q, T = lanczos(...)`` unpacking
        return iter((self.Q, self.T))


def lanczos(mvm: Callable[[np.ndarray], np.ndarray], seed_vector, rank, breakdown_tol=1e-12):
    """Lanczos tridiagonalization with full reorthogonalization.

    Returns ``Q`` (n x k) with orthonormal columns and the k x k tridiagonal
    ``T = Q^T A Q``. ``k == rank`` unless the Krylov space became invariant
    first, in which case the shorter factorization is returned and
    ``breakdown`` is set.
    """
    q = np.asarray(seed_vector, dtype=float)
    n = q.shape[0]
    if rank < 1 or rank > n:
        raise ValueError(f"rank must lie in [1, {n}], got {rank}")
    qnorm = np.linalg.norm(q)
    if qnorm == 0:
        raise ValueError("seed vector must be nonzero")
    Q = np.zeros((n, rank))
    alphas, betas = [], []
    Q[:, 0] = q / qnorm
    scale = 0.0
    breakdown = False
    for j in range(rank):
        w = mvm(Q[:, j])
        a = Q[:, j] @ w
        alphas.append(a)
        w = w - a * Q[:, j]
        if j > 0:
            w = w - betas[-1] * Q[:, j - 1]
        # two passes of classical Gram-Schmidt against every previous vector
        for _ in range(2):
            w = w - Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        b = np.linalg.norm(w)
        scale = max(scale, abs(a), b)
        if j == rank - 1:
            break
        if b <= breakdown_tol * max(scale, 1.0):
            breakdown = True
            break
        betas.append(b)
        Q[:, j + 1] = w / b
    k = len(alphas)
    return LanczosResult(Q[:, :k].copy(), SymTridiagonal(np.array(alphas), np.array(betas[: k - 1])),
                         breakdown)


def sparse_matvec(W: SparseRowMatrix, v):
    v = np.asarray(v, dtype=float)
    if v.shape[0] != W.cols:
        raise DimensionMismatch(f"expected vector of length {W.cols}, got {v.shape[0]}")
    return W.to_scipy() @ v
