"""CSR helpers, conjugate gradients, and shifted inverse iteration.

Matrices are plain ``scipy.sparse.csr_matrix`` objects kept in canonical
form (sorted, de-duplicated column indices). The solvers here are written
out by hand so their iteration counts and residuals can be reported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)

DEFAULT_CG_TOL = 1e-10
DEFAULT_EIG_SEED = 20201029


class NumericalError(RuntimeError):
    """Base class for solver failures."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EigenSolverError(NumericalError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConditioningError(NumericalError):
    pass


# --- CSR plumbing --------------------------------------------------------------


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR copy: float64, sorted and summed column indices."""
    A = sp.csr_matrix(A, dtype=np.float64, copy=True)
    A.sum_duplicates()
    A.sort_indices()
    return A


def check_csr(A) -> None:
    """Raise ``ValueError`` unless column indices are sorted and unique per row."""
    if not sp.issparse(A) or A.format != "csr":
        raise ValueError("expected a CSR matrix")
    indptr, indices = A.indptr, A.indices
    for r in range(A.shape[0]):
        cols = indices[indptr[r]:indptr[r + 1]]
        if cols.size > 1 and np.any(np.diff(cols) <= 0):
            raise ValueError(f"row {r}: column indices not strictly increasing")


def is_symmetric(A, tol: float = 0.0) -> bool:
    """Entry-for-entry symmetry check (exact when ``tol == 0``)."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        return False
    diff = (A - A.T).tocoo()
    if diff.nnz == 0:
        return True
    return bool(np.max(np.abs(diff.data)) <= tol)


# --- conjugate gradients ------------------------------------------------------


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    rel_residual: float


def cg_solve(
    A,
    b,
    rel_tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
    callback: Callable[[np.ndarray], None] | None = None,
) -> CGResult:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops when the true relative residual ``||Ax - b|| / ||b||`` is at most
    ``rel_tol``. The recursive residual is replaced by the true one whenever
    it claims convergence early, so the reported residual is never optimistic.

    Args:
        A: SPD matrix (anything supporting ``A @ x``).
        b: right-hand side.
        rel_tol: relative residual target.
        max_iter: iteration cap, default ``10 * len(b)``.
        callback: called with a copy of each iterate (for diagnostics).

    Raises:
        ConvergenceError: if the cap is hit; carries the last residual.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    x = np.zeros(n)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return CGResult(x, 0, 0.0)

    target = rel_tol * b_norm
    r = b.copy()
    p = r.copy()
    rr = r @ r
    it = 0
    while it < max_iter:
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            raise ConvergenceError(
                "matrix is not positive definite along the search direction",
                residual=np.sqrt(rr) / b_norm,
                iterations=it,
            )
        step = rr / pAp
        x += step * p
        r -= step * Ap
        it += 1
        if callback is not None:
            callback(x.copy())
        rr_new = r @ r
        if np.sqrt(rr_new) <= target:
            r = b - A @ x
            rr_new = r @ r
            if np.sqrt(rr_new) <= target:
                return CGResult(x, it, float(np.sqrt(rr_new) / b_norm))
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new

    res = float(np.linalg.norm(b - A @ x) / b_norm)
    raise ConvergenceError(
        f"CG did not reach rel_tol={rel_tol:g} in {max_iter} iterations (residual {res:.3e})",
        residual=res,
        iterations=it,
    )


# --- smallest eigenpairs -------------------------------------------------------


@dataclass
class EigenSubspace:
    """Orthonormal basis (columns of ``vectors``) with ascending eigenvalue estimates."""

    vectors: np.ndarray
    values: np.ndarray
    shift: float
    seed: int
    iterations: list = field(default_factory=list)
    stalled: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    def project(self, g) -> np.ndarray:
        """Orthogonal projection of ``g`` onto the span."""
        V = self.vectors
        return V @ (V.T @ np.asarray(g, dtype=np.float64))

    def validate(self, A, ortho_tol: float = 1e-8, rayleigh_tol: float = 1e-6) -> None:
        V = self.vectors
        gram = V.T @ V
        if np.max(np.abs(gram - np.eye(V.shape[1]))) > ortho_tol:
            raise EigenSolverError("eigen-subspace is not orthonormal")
        rq = np.einsum("ij,ij->j", V, A @ V)
        if np.max(np.abs(rq - self.values), initial=0.0) > rayleigh_tol:
            raise EigenSolverError("Rayleigh quotients disagree with stored eigenvalues")


def start_vectors(dim: int, k: int, seed: int) -> np.ndarray:
    """Deterministic Gaussian starting block of shape ``(dim, k)``."""
    return np.random.default_rng(seed).standard_normal((dim, k))


def smallest_eigs(
    A,
    k: int,
    shift: float,
    seed: int = DEFAULT_EIG_SEED,
    tol: float = 1e-6,
    max_iter: int = 500,
    null_tol: float = 1e-6,
    window: int = 25,
    refine_factor: float = 1e-6,
) -> EigenSubspace:
    """Bottom-``k`` eigenpairs of a symmetric PSD matrix by inverse iteration.

    Each vector is refined with ``(A + shift*I)^{-1}`` (one sparse LU
    factorization reused throughout) and Gram-Schmidt deflated against the
    vectors already accepted. A vector is accepted once
    ``||A v - rho v|| <= tol * (rho + shift)``. A final Rayleigh-Ritz step
    sorts the basis by eigenvalue.

    When the bottom eigenvalue is repeated, the returned basis spans the
    projection of the seeded starting block onto that eigenspace, so the
    result is reproducible from ``seed`` alone.

    A vector whose residual fails to halve over ``window`` steps has
    stalled, which means it sits in a cluster of eigenvalues the shift
    cannot separate. Two cases:

    * Rayleigh quotient at most ``null_tol * ||A||_inf``: a continuum of tiny
      eigenvalues just above an exact null space (smooth images). The
      iteration switches to the smaller shift ``refine_factor * shift`` (a
      second factorization) and carries on; a vector that stalls again is
      accepted as numerically null.
    * Otherwise the vector is a mixture inside a nonzero cluster. It is
      accepted provisionally; once the whole cluster is in the basis the
      Rayleigh-Ritz step separates it. Afterwards every Ritz pair above the
      null level must satisfy the acceptance test within ``10 * tol``.

    Accepted stalls are listed in ``stalled``.

    Raises:
        EigenSolverError: when ``max_iter`` runs out, or when a cluster is
            cut by ``k`` so the Ritz pairs stay inaccurate; ``partial`` holds
            the vectors accepted so far.
    """
    A = as_csr(A)
    dim = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if not 1 <= k <= dim:
        raise ValueError(f"k={k} outside [1, {dim}]")
    if shift <= 0:
        raise ValueError("shift must be positive")

    eye = sp.identity(dim, format="csr")
    lu = splu((A + shift * eye).tocsc())
    refined = False
    norm_inf = float(abs(A).sum(axis=1).max()) if A.nnz else 0.0
    X0 = start_vectors(dim, k, seed)
    basis = np.zeros((dim, 0))
    counts = []
    stalled = []

    def deflate(v):
        # Two passes of classical Gram-Schmidt keep the basis orthonormal to round-off.
        for _ in range(2):
            v = v - basis @ (basis.T @ v)
        return v

    for i in range(k):
        v = deflate(X0[:, i])
        nrm = np.linalg.norm(v)
        if nrm == 0.0:
            raise EigenSolverError("starting vector collapsed under deflation", partial=basis)
        v /= nrm
        converged = False
        history = []
        reason = "iteration limit"
        for it in range(1, max_iter + 1):
            w = deflate(lu.solve(v))
            nrm = np.linalg.norm(w)
            if nrm == 0.0 or not np.isfinite(nrm):
                reason = "breakdown"
                break
            v = w / nrm
            Av = A @ v
            rho = v @ Av
            res = np.linalg.norm(Av - rho * v) / (abs(rho) + shift)
            if res <= tol:
                converged = True
                break
            history.append(res)
            if len(history) > window and res > 0.5 * history[-1 - window]:
                if abs(rho) <= null_tol * norm_inf and not refined:
                    lu = splu((A + refine_factor * shift * eye).tocsc())
                    refined = True
                    history = []
                    continue
                stalled.append(i)
                converged = True
                break
        counts.append(it)
        if not converged:
            partial = _ritz(A, basis, shift, seed, counts, stalled) if basis.shape[1] else None
            raise EigenSolverError(
                f"inverse iteration failed on vector {i} after {it} steps ({reason})", partial=partial
            )
        basis = np.column_stack([basis, v])

    sub = _ritz(A, basis, shift, seed, counts, stalled)
    if stalled:
        V = sub.vectors
        res = np.linalg.norm(A @ V - V * sub.values, axis=0) / (np.abs(sub.values) + shift)
        loose = (np.abs(sub.values) > null_tol * norm_inf) & (res > 10 * tol)
        if np.any(loose):
            j = int(np.argmax(np.where(loose, res, 0.0)))
            raise EigenSolverError(
                f"stalled inside an eigenvalue cluster cut by k={k}: Ritz value {sub.values[j]:.4e} "
                f"keeps residual {res[j]:.2e}",
                partial=sub,
            )
    log.debug("smallest_eigs k=%d values=%s iterations=%s stalled=%s refined=%s",
              k, sub.values, counts, stalled, refined)
    return sub


def _ritz(A, basis, shift, seed, counts, stalled=()) -> EigenSubspace:
    H = basis.T @ (A @ basis)
    H = 0.5 * (H + H.T)
    vals, W = np.linalg.eigh(H)
    V = basis @ W
    # re-orthonormalize against round-off from the rotation
    V, R = np.linalg.qr(V)
    V = V * np.sign(np.diag(R))
    vals = np.einsum("ij,ij->j", V, A @ V)
    order = np.argsort(vals, kind="stable")
    return EigenSubspace(V[:, order], vals[order], float(shift), int(seed), list(counts), list(stalled))


# --- dense reference solve -----------------------------------------------------


def dense_oracle_solve(A, b, max_cond: float = 1e12) -> np.ndarray:
    """Direct LU solve used to cross-check the iterative paths.

    Raises:
        ConditioningError: when the 2-norm condition number reaches ``max_cond``.
    """
    A = np.asarray(A.toarray() if sp.issparse(A) else A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("dense oracle needs a square matrix")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= max_cond:
        raise ConditioningError(f"condition number {cond:.3e} exceeds {max_cond:.0e}")
    return scipy.linalg.lu_solve(scipy.linalg.lu_factor(A), b)
