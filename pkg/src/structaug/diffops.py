"""Forward-difference operators on an m x n grid and the smoothness operator P."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sparse_linalg import DEFAULT_CG_TOL, CGResult, as_csr, cg_solve, is_symmetric


@dataclass(frozen=True, eq=False)
class GridOperatorSet:
    """``Dx``, ``Dy`` (N x N, row-major pixel order) and ``P = Dx'Dx + Dy'Dy``."""

    Dx: sp.csr_matrix
    Dy: sp.csr_matrix
    P: sp.csr_matrix
    m: int
    n: int

    @property
    def size(self) -> int:
        return self.m * self.n

    def dirichlet_energy(self, v) -> float:
        return float(np.sum((self.Dx @ v) ** 2) + np.sum((self.Dy @ v) ** 2))

    def system(self, gamma: float) -> sp.csr_matrix:
        """``I + gamma * P`` as CSR."""
        return as_csr(sp.identity(self.size, format="csr") + gamma * self.P)


def _forward_diff_1d(n: int) -> sp.csr_matrix:
    # row k: -u[k] + u[k+1]; last row left empty
    rows = np.repeat(np.arange(n - 1), 2)
    cols = np.column_stack([np.arange(n - 1), np.arange(1, n)]).ravel()
    vals = np.tile([-1.0, 1.0], n - 1)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_diff_ops(m: int, n: int) -> GridOperatorSet:
    """Assemble the operators for an ``m``-row, ``n``-column grid.

    ``Dx`` differences along a row (pixel ``i*n + j`` against ``i*n + j + 1``),
    ``Dy`` along a column; rows on the trailing boundary are zero, which makes
    ``P`` annihilate constant vectors.
    """
    if m < 2 or n < 2:
        raise ValueError(f"difference operators need m, n >= 2, got {m}x{n}")
    Dx = as_csr(sp.kron(sp.identity(m), _forward_diff_1d(n)))
    Dy = as_csr(sp.kron(_forward_diff_1d(m), sp.identity(n)))
    P = as_csr(Dx.T @ Dx + Dy.T @ Dy)
    P.eliminate_zeros()
    if not is_symmetric(P):
        raise AssertionError("P assembled non-symmetric")
    return GridOperatorSet(Dx, Dy, P, m, n)


def apply_regularized_inverse(
    ops: GridOperatorSet,
    gamma: float,
    d,
    rel_tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
    system=None,
) -> CGResult:
    """Solve ``(I + gamma P) x = d`` with conjugate gradients.

    ``system`` may carry a prebuilt ``I + gamma P`` for reuse across calls.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (ops.size,):
        raise ValueError(f"right-hand side has shape {d.shape}, grid needs ({ops.size},)")
    if gamma == 0:
        return CGResult(d.copy(), 0, 0.0)
    A = system if system is not None else ops.system(gamma)
    return cg_solve(A, d, rel_tol=rel_tol, max_iter=max_iter)
