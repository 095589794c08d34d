"""Sparse linear solvers shared by cell problems, macro Newton systems and dual-norm solves.

Thin layer over scipy.sparse: direct factorization by default, optional
iterative solvers for large systems. Every solve verifies its residual
contract before returning.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class LinearSolveError(RuntimeError):
    """Raised when a solve fails to meet its residual tolerance."""


class SparseMatrix:
    """Compressed-row matrix with a symmetry flag and cached factorization."""

    def __init__(self, mat, symmetric=False, drop_tol=0.0):
        mat = sp.csr_matrix(mat)
        if drop_tol > 0.0:
            mat.data[np.abs(mat.data) < drop_tol] = 0.0
        mat.eliminate_zeros()
        mat.sort_indices()
        if mat.shape[0] != mat.shape[1]:
            raise ValueError("matrix must be square, got %s" % (mat.shape,))
        self.csr = mat
        self.n = mat.shape[0]
        self.symmetric = symmetric
        self._lu = None

    @property
    def factorization(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.csr.tocsc())
            except RuntimeError as exc:
                raise LinearSolveError("factorization failed: %s" % exc) from exc
        return self._lu

    def matvec(self, x):
        return self.csr @ x


def _check_residual(A, x, b, tol, label):
    bnorm = np.linalg.norm(b)
    rnorm = np.linalg.norm(A @ x - b)
    if rnorm > tol * max(bnorm, 1e-300):
        raise LinearSolveError(
            "%s residual %.3e exceeds tol %.3e (|b|=%.3e)" % (label, rnorm, tol, bnorm)
        )
    return x


def solve_spd(A, b, tol=1e-12, method="direct"):
    """Solve A x = b for symmetric positive (semi-)definite A.

    ``method`` is "direct" (sparse LU) or "cg" (diagonally preconditioned
    conjugate gradients). The relative residual is checked post-solve.
    """
    mat = A if isinstance(A, SparseMatrix) else SparseMatrix(A, symmetric=True)
    b = np.asarray(b, dtype=float)
    if method == "cg":
        diag = mat.csr.diagonal()
        diag = np.where(np.abs(diag) > 1e-300, diag, 1.0)
        M = spla.LinearOperator(mat.csr.shape, matvec=lambda v: v / diag)
        x, info = spla.cg(mat.csr, b, rtol=tol * 1e-2, atol=0.0, maxiter=20 * mat.n, M=M)
        if info != 0:
            raise LinearSolveError("cg failed to converge (info=%d)" % info)
    else:
        x = mat.factorization.solve(b)
    return _check_residual(mat.csr, x, b, tol, "solve_spd")


def solve_general(A, b, tol=1e-12, method="direct"):
    """Solve A x = b for nonsingular A (direct LU or BiCGStab)."""
    mat = A if isinstance(A, SparseMatrix) else SparseMatrix(A)
    b = np.asarray(b, dtype=float)
    if method == "bicgstab":
        diag = mat.csr.diagonal()
        diag = np.where(np.abs(diag) > 1e-300, diag, 1.0)
        M = spla.LinearOperator(mat.csr.shape, matvec=lambda v: v / diag)
        x, info = spla.bicgstab(mat.csr, b, rtol=tol * 1e-2, atol=0.0, maxiter=20 * mat.n, M=M)
        if info != 0:
            raise LinearSolveError("bicgstab failed to converge (info=%d)" % info)
    else:
        x = mat.factorization.solve(b)
    return _check_residual(mat.csr, x, b, tol, "solve_general")
