import numpy as np
import pytest
import scipy.sparse as sp

from hmmflow import linalg


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


class TestSolveSpd:
    def test_identity(self):
        b = np.arange(5.0)
        x = linalg.solve_spd(sp.eye(5, format="csr"), b)
        assert np.array_equal(x, b)

    def test_hand_2x2(self):
        A = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        x = linalg.solve_spd(A, np.array([3.0, 3.0]))
        assert x == pytest.approx([1.0, 1.0], abs=1e-14)

    def test_random_spd_against_dense_oracle(self):
        A = random_spd(50, seed=1)
        b = np.random.default_rng(2).normal(size=50)
        x_dense = np.linalg.solve(A, b)
        x = linalg.solve_spd(sp.csr_matrix(A), b)
        assert np.abs(x - x_dense).max() < 1e-10

    def test_cg_path(self):
        A = random_spd(40, seed=3)
        b = np.random.default_rng(4).normal(size=40)
        x = linalg.solve_spd(sp.csr_matrix(A), b, tol=1e-10, method="cg")
        assert np.abs(A @ x - b).max() < 1e-8 * np.abs(b).max()


class TestSolveGeneral:
    def test_identity(self):
        b = np.arange(4.0) + 1
        assert np.array_equal(linalg.solve_general(sp.eye(4, format="csr"), b), b)

    def test_permutation(self):
        P = sp.csr_matrix(np.eye(4)[[2, 0, 3, 1]])
        b = np.array([1.0, 2.0, 3.0, 4.0])
        x = linalg.solve_general(P, b)
        assert np.array_equal(P @ x, b)

    def test_random_general_against_dense_oracle(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(50, 50)) + 50 * np.eye(50)
        b = rng.normal(size=50)
        x_dense = np.linalg.solve(A, b)
        x = linalg.solve_general(sp.csr_matrix(A), b)
        assert np.abs(x - x_dense).max() < 1e-10

    def test_singular_raises(self):
        A = sp.csr_matrix(np.zeros((3, 3)))
        with pytest.raises(linalg.LinearSolveError):
            linalg.solve_general(A, np.ones(3))

    def test_nonsquare_rejected(self):
        with pytest.raises(ValueError):
            linalg.SparseMatrix(sp.csr_matrix(np.ones((2, 3))))


class TestResidualContract:
    def test_contract_checked_post_solve(self):
        # nearly singular system: LU succeeds but the residual check guards it
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0 + 1e-16]]))
        try:
            linalg.solve_general(A, np.array([1.0, 2.0]), tol=1e-12)
        except linalg.LinearSolveError:
            pass  # either a clean failure or a verified solve is acceptable
