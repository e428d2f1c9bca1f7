"""Edge-preserving recolorization.

For an RGB image with channel planes A, B, C the penalty on a color change
``zdot`` is ``|M_A zdot_A + M_B zdot_B + M_C zdot_C|^2`` where

    M_c = diag(z_{c,x} / e) Dx + diag(z_{c,y} / e) Dy

and ``e`` is the per-pixel norm of all six channel gradients (plus ``eps``).
``M = B'B`` with ``B = [M_A | M_B | M_C]`` is the 3N x 3N Gram operator.
Directions with low ``zdot' M zdot`` change colors without changing edginess.

``M`` is singular (every per-channel constant shift is in its null space,
and generically the null space has dimension about 2N), so two realizations
are offered: a Tikhonov-guarded solve ``(M + mu I) zdot = g / lam`` and an
orthogonal projection of ``g`` onto a bottom-k eigen-subspace of ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .diffops import GridOperatorSet, build_diff_ops
from .sparse_linalg import (
    DEFAULT_EIG_SEED,
    EigenSubspace,
    as_csr,
    cg_solve,
    is_symmetric,
    smallest_eigs,
)
from .tensor_core import Image, spatial_gradients, vectorize_all

MAX_PIXELS = 65536


@dataclass(frozen=True)
class RecolorParams:
    mode: str = "project"  # or "solve"
    lam: float = 1.0
    mu: float = 1e-2
    k: int = 2
    eps: float = 1e-3
    budget: float = 0.1
    seed: int = DEFAULT_EIG_SEED

    def __post_init__(self):
        if self.mode not in ("project", "solve"):
            raise ValueError(f"unknown recolor mode {self.mode!r}")
        for name in ("lam", "mu", "eps", "budget"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True, eq=False)
class EdginessField:
    e: np.ndarray
    eps: float


@dataclass(frozen=True, eq=False)
class RecolorOperator:
    MA: sp.csr_matrix
    MB: sp.csr_matrix
    MC: sp.csr_matrix
    M: sp.csr_matrix
    image_id: str
    eps: float
    shape: tuple[int, int]

    @property
    def B(self) -> sp.csr_matrix:
        return sp.hstack([self.MA, self.MB, self.MC], format="csr")

    @property
    def size(self) -> int:
        return self.M.shape[0]


def _require_rgb(img: Image):
    if img.channels != 3:
        raise ValueError(f"recolorization needs a 3-channel image, got {img.channels}")


def edginess(img: Image, eps: float = 1e-3) -> EdginessField:
    """Per-pixel norm of ``[A_x, A_y, B_x, B_y, C_x, C_y]`` plus ``eps``."""
    _require_rgb(img)
    if eps <= 0:
        raise ValueError("eps must be positive")
    sq = np.zeros(img.num_pixels)
    for c in range(3):
        zx, zy = spatial_gradients(img, c)
        sq += zx * zx + zy * zy
    return EdginessField(np.sqrt(sq) + eps, float(eps))


def build_recolor_operator(
    img: Image,
    eps: float = 1e-3,
    ops: GridOperatorSet | None = None,
    max_pixels: int = MAX_PIXELS,
) -> RecolorOperator:
    _require_rgb(img)
    if img.num_pixels > max_pixels:
        raise ValueError(f"image has {img.num_pixels} pixels, operator cap is {max_pixels}")
    if ops is None:
        ops = build_diff_ops(*img.shape)
    e = edginess(img, eps).e
    blocks = []
    for c in range(3):
        zx, zy = spatial_gradients(img, c)
        blocks.append(as_csr(sp.diags(zx / e) @ ops.Dx + sp.diags(zy / e) @ ops.Dy))
    B = sp.hstack(blocks, format="csr")
    M = B.T @ B
    # exact symmetry: (a + b) / 2 is commutative in floating point
    M = as_csr(0.5 * (M + M.T))
    M.eliminate_zeros()
    if not is_symmetric(M):
        raise AssertionError("recolor operator is not symmetric")
    return RecolorOperator(*blocks, M, img.content_hash(), float(eps), img.shape)


def penalty(op: RecolorOperator, zdot) -> float:
    """``|M_A zdot_A + M_B zdot_B + M_C zdot_C|^2`` with unit grid spacing."""
    zdot = np.asarray(zdot, dtype=np.float64)
    N = op.MA.shape[0]
    if zdot.shape != (3 * N,):
        raise ValueError(f"expected a vector of length {3 * N}")
    r = op.MA @ zdot[:N] + op.MB @ zdot[N:2 * N] + op.MC @ zdot[2 * N:]
    return float(r @ r)


def _grad_vector(op: RecolorOperator, g) -> np.ndarray:
    data = np.asarray(getattr(g, "data", g), dtype=np.float64).ravel()
    if data.shape != (op.size,):
        raise ValueError(f"gradient length {data.size} != {op.size}")
    if not np.all(np.isfinite(data)):
        raise ValueError("gradient has non-finite entries")
    return data


def recolor_solve(op: RecolorOperator, g, lam: float = 1.0, mu: float = 1e-2, rel_tol: float = 1e-10) -> np.ndarray:
    """Solve ``(M + mu I) zdot = g / lam`` by conjugate gradients."""
    if lam <= 0 or mu <= 0:
        raise ValueError("lam and mu must be positive")
    g = _grad_vector(op, g)
    A = as_csr(op.M + mu * sp.identity(op.size, format="csr"))
    return cg_solve(A, g / lam, rel_tol=rel_tol).x


def recolor_subspace(op: RecolorOperator, k: int = 2, mu: float = 1e-2, seed: int = DEFAULT_EIG_SEED) -> EigenSubspace:
    """Bottom-``k`` eigen-subspace of ``M`` (shift-inverted with ``mu``)."""
    return smallest_eigs(op.M, k, mu, seed=seed)


def recolor_project(
    op: RecolorOperator,
    g,
    k: int = 2,
    mu: float = 1e-2,
    scale: float = 1.0,
    seed: int = DEFAULT_EIG_SEED,
    subspace: EigenSubspace | None = None,
) -> np.ndarray:
    """``scale * V V' g`` for the bottom-``k`` eigenvectors ``V`` of ``M``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = _grad_vector(op, g)
    if subspace is None:
        subspace = recolor_subspace(op, k, mu, seed)
    return scale * subspace.project(g)


def structured_perturbation(
    img: Image,
    g,
    params: RecolorParams = RecolorParams(),
    op: RecolorOperator | None = None,
    subspace: EigenSubspace | None = None,
) -> np.ndarray:
    """Raw structured direction (before budget scaling) for ``img``."""
    if op is None:
        op = build_recolor_operator(img, params.eps)
    if params.mode == "solve":
        return recolor_solve(op, g, params.lam, params.mu)
    return recolor_project(op, g, params.k, params.mu, 1.0, params.seed, subspace)


def photometric_augment(
    img: Image,
    g,
    params: RecolorParams = RecolorParams(),
    op: RecolorOperator | None = None,
    subspace: EigenSubspace | None = None,
) -> Image:
    """Add the structured color change, scaled so ``max|zdot| == params.budget``."""
    _require_rgb(img)
    zdot = structured_perturbation(img, g, params, op, subspace)
    peak = np.max(np.abs(zdot), initial=0.0)
    if peak == 0.0:
        return img
    zdot = zdot * (params.budget / peak)
    return Image(np.clip(vectorize_all(img) + zdot, 0.0, 1.0).reshape(img.data.shape))
