import math

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from pairgp import sparse


def random_spd(rng, n, density=0.3):
    a = sp.random(n, n, density=density, random_state=np.random.RandomState(int(rng.integers(2**31)))).toarray()
    return a @ a.T + n * np.eye(n) * 0.1 + np.eye(n)


class TestAssemble:
    def test_empty(self):
        m = sparse.assemble(3, [], [], [])
        assert m.nnz == 0
        assert m.toarray().shape == (3, 3)

    def test_duplicates_summed(self):
        m = sparse.assemble(2, [0, 0], [0, 0], [1.0, 2.0])
        assert m.toarray()[0, 0] == 3.0
        assert m.nnz == 1

    def test_symmetry_implied(self):
        m = sparse.assemble(2, [1], [0], [5.0])
        np.testing.assert_array_equal(m.toarray(), [[0, 5], [5, 0]])

    def test_upper_triple_mirrored(self):
        m = sparse.assemble(2, [0], [1], [5.0])
        assert m.toarray()[1, 0] == 5.0

    def test_errors(self):
        with pytest.raises(IndexError):
            sparse.assemble(2, [2], [0], [1.0])
        with pytest.raises(ValueError):
            sparse.assemble(2, [0], [0], [np.inf])

    def test_matrix_market(self, tmp_path):
        m = sparse.from_full(np.diag([1.0, 2.0]))
        m.to_matrix_market(tmp_path / "m.mtx")
        import scipy.io

        np.testing.assert_array_equal(scipy.io.mmread(str(tmp_path / "m.mtx")).toarray(), np.diag([1.0, 2.0]))


class TestCholesky:
    def test_identity(self):
        f = sparse.cholesky(sparse.from_full(np.eye(5)))
        np.testing.assert_allclose(f.factor.toarray(), np.eye(5))
        assert sparse.log_det(f) == 0.0

    def test_diagonal(self):
        f = sparse.cholesky(sparse.from_full(np.diag([4.0, 9.0])))
        np.testing.assert_allclose(np.sort(f.factor.diagonal()), [2.0, 3.0])
        np.testing.assert_allclose(sparse.solve(sparse.cholesky(sparse.from_full(np.diag([2.0, 4.0]))), [2, 4]), [1, 1])

    def test_log_det_of_e_identity(self):
        f = sparse.cholesky(sparse.from_full(np.diag([math.e, math.e])))
        assert sparse.log_det(f) == pytest.approx(2.0)

    def test_not_positive_definite_reports_pivot(self):
        a = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(sparse.NotPositiveDefiniteError) as info:
            sparse.cholesky(sparse.from_full(a))
        assert info.value.pivot >= 0

    def test_solve_length_mismatch(self):
        f = sparse.cholesky(sparse.from_full(np.eye(3)))
        with pytest.raises(ValueError):
            sparse.solve(f, np.ones(4))

    def test_empty(self):
        f = sparse.cholesky(sparse.from_full(np.zeros((0, 0))))
        assert sparse.log_det(f) == 0.0
        assert sparse.solve(f, np.zeros(0)).shape == (0,)

    @pytest.mark.parametrize("n", [1, 2, 5, 12, 20])
    def test_dense_oracle(self, n, rng):
        a = random_spd(rng, n)
        f = sparse.cholesky(sparse.from_full(a))
        p = f.permutation
        l = f.factor.toarray()
        np.testing.assert_allclose(l @ l.T, a[np.ix_(p, p)], rtol=1e-8, atol=1e-8 * np.abs(a).max())
        b = rng.normal(size=n)
        np.testing.assert_allclose(sparse.solve(f, b), np.linalg.solve(a, b), rtol=1e-8, atol=1e-10)
        assert sparse.log_det(f) == pytest.approx(np.linalg.slogdet(a)[1], abs=1e-8)

    def test_multiple_rhs(self, rng):
        a = random_spd(rng, 10)
        b = rng.normal(size=(10, 3))
        np.testing.assert_allclose(sparse.solve(sparse.cholesky(sparse.from_full(a)), b), np.linalg.solve(a, b))

    def test_analysis_reuse(self, rng):
        a = random_spd(rng, 15)
        m = sparse.from_full(a)
        an = sparse.analyze(m)
        f1 = sparse.cholesky(m, an)
        f2 = sparse.cholesky(sparse.from_full(2 * a), an)
        assert sparse.log_det(f2) == pytest.approx(sparse.log_det(f1) + 15 * math.log(2))

    def test_deterministic(self, rng):
        m = sparse.from_full(random_spd(rng, 20))
        f1, f2 = sparse.cholesky(m), sparse.cholesky(m)
        assert np.array_equal(f1.permutation, f2.permutation)
        assert sparse.log_det(f1) == sparse.log_det(f2)


class TestProperties:
    @given(st.integers(1, 50), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_residual_and_log_det(self, n, seed):
        rng = np.random.default_rng(seed)
        a = random_spd(rng, n, density=0.15)
        f = sparse.cholesky(sparse.from_full(a))
        b = rng.normal(size=n)
        x = sparse.solve(f, b)
        assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-8
        assert sparse.log_det(f) == pytest.approx(np.linalg.slogdet(a)[1], abs=1e-8)

    @given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_block_diagonal_log_det_is_sum(self, sizes, seed):
        rng = np.random.default_rng(seed)
        blocks = [random_spd(rng, s, density=0.5) for s in sizes]
        f = sparse.cholesky(sparse.from_full(scipy.linalg.block_diag(*blocks)))
        expected = sum(np.linalg.slogdet(b)[1] for b in blocks)
        assert sparse.log_det(f) == pytest.approx(expected, abs=1e-8)
