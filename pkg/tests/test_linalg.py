import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkgp import linalg
from dkgp.errors import (
    DimensionMismatch,
    NoConvergence,
    NonSquare,
    NonSymmetric,
    NotPositiveDefinite,
)
from dkgp.linalg import SparseRowMatrix, SymTridiagonal


def random_pd(n, seed):
    M = np.random.default_rng(seed).standard_normal((n, n))
    return M.T @ M + np.eye(n)


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(linalg.cholesky(np.eye(3)), np.eye(3))

    def test_two_by_two(self):
        L = linalg.cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, math.sqrt(2)]], atol=1e-15)

    def test_indefinite_raises(self):
        # eigenvalues 3 and -1
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_non_square(self):
        with pytest.raises(NonSquare):
            linalg.cholesky(np.ones((2, 3)))

    def test_non_symmetric(self):
        with pytest.raises(NonSymmetric):
            linalg.cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))

    def test_jitter_rescues_semidefinite(self):
        A = np.ones((3, 3))  # rank one
        L = linalg.cholesky(A)
        assert np.all(np.isfinite(L))
        np.testing.assert_allclose(L @ L.T, A, atol=1e-3)

    @pytest.mark.parametrize("seed", range(10))
    def test_reconstruction(self, seed):
        A = random_pd(12, seed)
        L = linalg.cholesky(A)
        assert np.all(np.triu(L, 1) == 0)
        assert np.linalg.norm(L @ L.T - A) / np.linalg.norm(A) < 1e-10


class TestSolve:
    def test_identity(self):
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(linalg.solve_psd(np.eye(3), b), b)

    def test_two_by_two(self):
        x = linalg.solve_psd(np.array([[4.0, 2.0], [2.0, 3.0]]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(x, [0.375, -0.25], atol=1e-14)

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefinite):
            linalg.solve_psd(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))

    def test_logdet(self):
        A = random_pd(6, 3)
        L = linalg.cholesky(A)
        assert linalg.logdet_from_cholesky(L) == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-12)


class TestSymEigen:
    def test_diagonal(self):
        w, _ = linalg.sym_eigen(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_allclose(w, [3, 2, 1])

    def test_two_by_two(self):
        w, _ = linalg.sym_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(w, [3, 1], atol=1e-14)

    def test_identity(self):
        w, _ = linalg.sym_eigen(np.eye(4))
        np.testing.assert_allclose(w, np.ones(4))

    def test_eigenpairs(self):
        A = random_pd(8, 1)
        w, V = linalg.sym_eigen(A)
        np.testing.assert_allclose(A @ V, V * w, atol=1e-8)
        np.testing.assert_allclose(V.T @ V, np.eye(8), atol=1e-8)

    def test_non_symmetric(self):
        with pytest.raises(NonSymmetric):
            linalg.sym_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestConjugateGradient:
    def test_identity_one_iteration(self):
        b = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(linalg.conjugate_gradient(lambda v: v, b), b)

    def test_matches_cholesky(self):
        A = np.array([[4.0, 2.0], [2.0, 3.0]])
        b = np.array([1.0, 0.0])
        x = linalg.conjugate_gradient(lambda v: A @ v, b, tol=1e-12)
        np.testing.assert_allclose(x, linalg.solve_psd(A, b), atol=1e-11)

    def test_zero_budget(self):
        with pytest.raises(NoConvergence) as info:
            linalg.conjugate_gradient(lambda v: 2 * v, np.ones(3), tol=1e-8, max_iter=0)
        assert info.value.iterations == 0
        assert info.value.residual == pytest.approx(1.0)

    def test_zero_rhs(self):
        np.testing.assert_array_equal(linalg.conjugate_gradient(lambda v: v, np.zeros(4)), 0)

    @pytest.mark.parametrize("n", [10, 100, 500])
    def test_agrees_with_solve_psd(self, n):
        rng = np.random.default_rng(n)
        M = rng.standard_normal((n, n)) / math.sqrt(n)
        A = M.T @ M + np.eye(n)
        b = rng.standard_normal(n)
        tol = 1e-8
        x = linalg.conjugate_gradient(lambda v: A @ v, b, tol=tol)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= tol
        exact = linalg.solve_psd(A, b)
        assert np.linalg.norm(x - exact) / np.linalg.norm(exact) <= 10 * tol * np.linalg.cond(A)


class TestLanczos:
    def test_diagonal_full_rank(self):
        A = np.diag([1.0, 2.0, 3.0])
        Q, T = linalg.lanczos(lambda v: A @ v, np.ones(3), 3)
        w, _ = linalg.sym_eigen(T.todense())
        np.testing.assert_allclose(np.sort(w), [1, 2, 3], atol=1e-8)

    def test_identity_breaks_down(self):
        res = linalg.lanczos(lambda v: v, np.array([0.3, -1.0, 2.0, 0.5]), 4)
        assert res.breakdown
        np.testing.assert_allclose(res.T.todense(), np.eye(1))
        assert res.Q.shape == (4, 1)

    def test_random_pd_spectrum(self):
        A = random_pd(10, 7)
        Q, T = linalg.lanczos(lambda v: A @ v, np.random.default_rng(0).standard_normal(10), 10)
        np.testing.assert_allclose(np.sort(T.eigh()[0]), np.sort(np.linalg.eigvalsh(A)),
                                   rtol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_orthogonality_and_projection(self, seed):
        rng = np.random.default_rng(seed)
        S = rng.standard_normal((20, 20))
        A = S + S.T
        Q, T = linalg.lanczos(lambda v: A @ v, rng.standard_normal(20), 20)
        np.testing.assert_allclose(Q.T @ Q, np.eye(Q.shape[1]), atol=1e-6)
        np.testing.assert_allclose(Q.T @ A @ Q, T.todense(), atol=1e-6)
        np.testing.assert_allclose(np.sort(T.eigh()[0]), np.sort(np.linalg.eigvalsh(A)),
                                   atol=1e-6)

    def test_rank_above_dimension(self):
        with pytest.raises(ValueError):
            linalg.lanczos(lambda v: v, np.ones(3), 4)

    def test_zero_seed(self):
        with pytest.raises(ValueError):
            linalg.lanczos(lambda v: v, np.zeros(3), 2)


class TestSparse:
    def test_identity(self):
        W = SparseRowMatrix.from_dense(np.eye(4))
        v = np.array([1.0, -2.0, 3.0, 0.5])
        np.testing.assert_array_equal(linalg.sparse_matvec(W, v), v)

    def test_selection_row(self):
        W = SparseRowMatrix.from_dense(np.array([[0.0, 1.0, 0.0, 0.0]]))
        assert linalg.sparse_matvec(W, np.array([5.0, 6.0, 7.0, 8.0]))[0] == 6.0

    def test_dimension_mismatch(self):
        W = SparseRowMatrix.from_dense(np.eye(3))
        with pytest.raises(DimensionMismatch):
            linalg.sparse_matvec(W, np.ones(4))

    def test_duplicates_are_summed(self):
        W = SparseRowMatrix.from_triplets(2, 3, [0, 0, 1], [1, 1, 2], [0.25, 0.5, 1.0])
        np.testing.assert_array_equal(W.todense(), [[0, 0.75, 0], [0, 0, 1.0]])
        np.testing.assert_array_equal(W.row_nnz(), [1, 1])

    def test_invalid_structure(self):
        with pytest.raises(ValueError):
            SparseRowMatrix(2, 2, np.array([0, 2, 1]), np.array([0]), np.array([1.0]))
        with pytest.raises(ValueError):
            SparseRowMatrix(1, 2, np.array([0, 1]), np.array([5]), np.array([1.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_matches_dense(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((rows, cols)) * (rng.uniform(size=(rows, cols)) < 0.3)
        W = SparseRowMatrix.from_dense(A)
        v = rng.standard_normal(cols)
        u = rng.standard_normal(rows)
        scale = np.abs(A).sum() * max(np.abs(v).max(), np.abs(u).max()) + 1e-300
        assert np.abs(W.matvec(v) - A @ v).max() <= 1e-13 * scale
        assert np.abs(W.rmatvec(u) - A.T @ u).max() <= 1e-13 * scale


def test_sym_tridiagonal():
    T = SymTridiagonal(np.array([2.0, 2.0, 2.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(T.todense(), [[2, 1, 0], [1, 2, 1], [0, 1, 2]])
    np.testing.assert_allclose(np.sort(T.eigh()[0]), np.sort(np.linalg.eigvalsh(T.todense())))
    with pytest.raises(ValueError):
        SymTridiagonal(np.ones(3), np.ones(3))
