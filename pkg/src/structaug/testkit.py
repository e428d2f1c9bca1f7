"""Brute-force oracles and deterministic desk-scale corpora.

Nothing here calls into the sparse operator path: difference operators are
assembled densely with explicit loops and systems are solved with LAPACK.
Only the :class:`~structaug.tensor_core.Image` type is shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor_core import Image

FLOW_ORACLE_MAX_N = 256
RECOLOR_ORACLE_MAX_DIM = 768


class OracleSizeError(ValueError):
    pass


# --- dense building blocks ---------------------------------------------------------


def dense_diff_ops(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Loop-assembled forward differences with zero trailing rows."""
    N = m * n
    Dx = np.zeros((N, N))
    Dy = np.zeros((N, N))
    for i in range(m):
        for j in range(n):
            r = i * n + j
            if j + 1 < n:
                Dx[r, r] = -1.0
                Dx[r, r + 1] = 1.0
            if i + 1 < m:
                Dy[r, r] = -1.0
                Dy[r, r + n] = 1.0
    return Dx, Dy


def loop_gradients(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m, n = plane.shape
    zx = np.zeros(m * n)
    zy = np.zeros(m * n)
    for i in range(m):
        for j in range(n):
            if j + 1 < n:
                zx[i * n + j] = plane[i, j + 1] - plane[i, j]
            if i + 1 < m:
                zy[i * n + j] = plane[i + 1, j] - plane[i, j]
    return zx, zy


def dense_matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row sums accumulated left to right in ascending column order."""
    out = np.zeros(A.shape[0])
    for r in range(A.shape[0]):
        s = 0.0
        for c in range(A.shape[1]):
            a = A[r, c]
            if a != 0.0:
                s += a * x[c]
        out[r] = s
    return out


def loop_edginess(img: Image, eps: float) -> np.ndarray:
    m, n = img.shape
    e = np.zeros(m * n)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for c in range(3):
                z = img.data[c]
                gx = z[i, j + 1] - z[i, j] if j + 1 < n else 0.0
                gy = z[i + 1, j] - z[i, j] if i + 1 < m else 0.0
                s += gx * gx + gy * gy
            e[i * n + j] = np.sqrt(s) + eps
    return e


def dense_recolor_blocks(img: Image, eps: float) -> np.ndarray:
    """Dense ``B = [M_A | M_B | M_C]`` (N x 3N)."""
    m, n = img.shape
    Dx, Dy = dense_diff_ops(m, n)
    e = loop_edginess(img, eps)
    blocks = []
    for c in range(3):
        zx, zy = loop_gradients(img.data[c])
        blocks.append((zx / e)[:, None] * Dx + (zy / e)[:, None] * Dy)
    return np.hstack(blocks)


def loop_warp(img: Image, xdot: np.ndarray, ydot: np.ndarray, delta: float) -> Image:
    """Per-pixel bilinear backward warp (reference for the vectorized warper)."""
    C, m, n = img.data.shape
    out = np.zeros((C, m, n))
    for i in range(m):
        for j in range(n):
            y = min(max(i - delta * ydot[i, j], 0.0), m - 1.0)
            x = min(max(j - delta * xdot[i, j], 0.0), n - 1.0)
            i0 = min(int(np.floor(y)), max(m - 2, 0))
            j0 = min(int(np.floor(x)), max(n - 2, 0))
            i1 = min(i0 + 1, m - 1)
            j1 = min(j0 + 1, n - 1)
            wy = y - i0
            wx = x - j0
            for c in range(C):
                z = img.data[c]
                top = (1.0 - wx) * z[i0, j0] + wx * z[i0, j1]
                bot = (1.0 - wx) * z[i1, j0] + wx * z[i1, j1]
                out[c, i, j] = min(max((1.0 - wy) * top + wy * bot, 0.0), 1.0)
    return Image(out)


# --- oracles ----------------------------------------------------------------------


@dataclass
class DenseFlow:
    xdot: np.ndarray
    ydot: np.ndarray


def dense_flow_oracle(img: Image, g, alpha: float, gamma: float) -> DenseFlow:
    """Flow ``-(1/alpha) (I + gamma P)^{-1} d`` by dense LU."""
    m, n = img.shape
    N = m * n
    if N > FLOW_ORACLE_MAX_N:
        raise OracleSizeError(f"flow oracle capped at N={FLOW_ORACLE_MAX_N}, got {N}")
    g = np.asarray(getattr(g, "data", g), dtype=np.float64).reshape(img.channels, N)
    dx = np.zeros(N)
    dy = np.zeros(N)
    for c in range(img.channels):
        zx, zy = loop_gradients(img.data[c])
        dx += zx * g[c]
        dy += zy * g[c]
    Dx, Dy = dense_diff_ops(m, n)
    A = np.eye(N) + gamma * (Dx.T @ Dx + Dy.T @ Dy)
    xs = np.linalg.solve(A, np.column_stack([dx, dy]))
    return DenseFlow((-xs[:, 0] / alpha).reshape(m, n), (-xs[:, 1] / alpha).reshape(m, n))


def dense_recolor_oracle(
    img: Image,
    g,
    lam: float | None = None,
    mu: float | None = None,
    k: int | None = None,
    eps: float = 1e-3,
    seed: int | None = None,
    cluster_tol: float = 1e-9,
) -> np.ndarray:
    """Reference ``zdot`` for the Tikhonov solve (``lam``, ``mu``) or the projection (``k``).

    Projection mode: the bottom-``k`` eigenvalues of ``M`` are found with
    ``numpy.linalg.eigh``. Eigenspaces entirely below the ``k``-th value are
    kept whole. If the eigenspace holding the ``k``-th value is larger than
    the remaining slots, the basis inside it is the projection of the seeded
    Gaussian start block (``default_rng(seed).standard_normal((3N, k))``),
    which is the limit the inverse iteration converges to.
    """
    N = img.num_pixels
    if 3 * N > RECOLOR_ORACLE_MAX_DIM:
        raise OracleSizeError(f"recolor oracle capped at 3N={RECOLOR_ORACLE_MAX_DIM}, got {3 * N}")
    B = dense_recolor_blocks(img, eps)
    M = B.T @ B
    g = np.asarray(getattr(g, "data", g), dtype=np.float64).ravel()
    if k is None:
        if lam is None or mu is None:
            raise ValueError("solve mode needs lam and mu")
        return np.linalg.solve(M + mu * np.eye(3 * N), g / lam)

    w, V = np.linalg.eigh(M)
    scale = max(np.max(np.abs(w)), 1.0)
    kth = w[k - 1]
    below = np.where(w < kth - cluster_tol * scale)[0]
    cluster = np.where(np.abs(w - kth) <= cluster_tol * scale)[0]
    slots = k - below.size
    parts = [V[:, below]]
    if cluster.size > slots:
        if seed is None:
            raise ValueError("degenerate bottom eigenspace: a seed is needed to pin the basis")
        X0 = np.random.default_rng(seed).standard_normal((3 * N, k))
        Vc = V[:, cluster]
        Xb = X0 - V[:, below] @ (V[:, below].T @ X0)
        proj = Vc @ (Vc.T @ Xb)
        # the first `slots` seeded columns that survive deflation span the chosen part
        q, _ = np.linalg.qr(proj[:, below.size:below.size + slots])
        parts.append(q)
    else:
        parts.append(V[:, cluster[:slots]])
    basis = np.column_stack(parts)
    return basis @ (basis.T @ g)


class ProbeRow(NamedTuple):
    delta: float
    observed: float
    predicted: float

    @property
    def ratio(self) -> float:
        return self.observed / self.predicted if self.predicted != 0 else float("nan")


def fd_loss_probe(clf, img: Image, label: int, perturbation, deltas, rate: float | None = None):
    """Observed vs first-order predicted loss change along a perturbation.

    ``perturbation`` is either an additive direction (vector of image size;
    applied without clamping) or a callable ``delta -> Image``. For callables
    the first-order ``rate`` (dL/d delta at 0) must be supplied.
    """
    deltas = [float(d) for d in deltas]
    if any(d <= 0 for d in deltas) or any(a <= b for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be positive and descending")
    z = img.data.reshape(-1)
    base = clf.loss(z[None], [label])
    if not np.isfinite(base):
        raise ValueError("non-finite base loss")
    if callable(perturbation):
        if rate is None:
            raise ValueError("callable perturbations need an explicit first-order rate")
        evaluate = lambda d: perturbation(d).data.reshape(-1)
    else:
        p = np.asarray(perturbation, dtype=np.float64).ravel()
        if rate is None:
            rate = float(clf.input_gradient(z, label) @ p)
        evaluate = lambda d: z + d * p
    rows = []
    for d in deltas:
        val = clf.loss(evaluate(d)[None], [label])
        if not np.isfinite(val):
            raise ValueError(f"non-finite loss at delta={d}")
        rows.append(ProbeRow(d, val - base, d * rate))
    return rows


# --- corpora ------------------------------------------------------------------------


def _soft(t):
    return np.exp(-0.5 * t * t)


def synthetic_bars(count: int, size: int = 8, seed: int = 0, classes: int = 3):
    """Soft-edged RGB bars/blob dataset with intensities inside [0.05, 0.95].

    Classes: 0 horizontal bar, 1 vertical bar, 2 round blob, 3 diagonal bar.
    Returns ``(images, labels)`` with images shaped ``(count, 3, size, size)``.
    """
    if not 2 <= classes <= 4:
        raise ValueError("classes must be in [2, 4]")
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((count, 3, size, size))
    labels = np.empty(count, dtype=np.intp)
    lo, hi = 1.5, size - 2.5
    for t in range(count):
        label = t % classes
        bg = rng.uniform(0.15, 0.35, 3)
        fg = rng.uniform(0.6, 0.85, 3)
        r, c = rng.uniform(lo, hi, 2)
        if label == 0:
            w = _soft((ii - r) / 0.9)
        elif label == 1:
            w = _soft((jj - c) / 0.9)
        elif label == 2:
            w = _soft(np.hypot(ii - r, jj - c) / 1.3)
        else:
            w = _soft((ii - jj - (r - c)) / 1.2)
        img = bg[:, None, None] + (fg - bg)[:, None, None] * w[None]
        img += rng.normal(0.0, 0.01, img.shape)
        images[t] = np.clip(img, 0.05, 0.95)
        labels[t] = label
    return images, labels


@dataclass
class DeskCorpus:
    """Deterministic family of small test images fixed by ``seed``.

    Constants, ramps and a soft blob at every size; unless ``smooth_only``,
    also step edges, checkerboards, seeded noise and (from 4x4 up) the four
    bar/disc shapes of :func:`synthetic_bars`. RGB corpora end with
    ``bars_count`` labeled 8x8 images drawn from that dataset.
    """

    seed: int = 0
    sizes: tuple = ((2, 2), (3, 3), (4, 4), (4, 6), (8, 8), (16, 16), (32, 32))
    bars_count: int = 24

    def generate(self, channels: int = 3, smooth_only: bool = False) -> list[tuple[str, Image]]:
        rng = np.random.default_rng([self.seed, channels])
        out = []
        for m, n in self.sizes:
            ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
            tint = rng.uniform(0.2, 0.8, (channels, 1, 1))
            planes = {
                "constant": np.broadcast_to(tint, (channels, m, n)),
                "ramp_x": tint * 0.5 + 0.4 * (jj / max(n - 1, 1))[None],
                "ramp_y": tint * 0.5 + 0.4 * (ii / max(m - 1, 1))[None],
                "blob": 0.2 + 0.6 * tint * _soft(np.hypot(ii - m / 2, jj - n / 2) / max(m, n) * 3)[None],
            }
            if not smooth_only:
                planes["step"] = np.where(jj < n // 2, 0.2, 0.8)[None] * np.ones((channels, 1, 1))
                planes["checker"] = np.where((ii + jj) % 2 == 0, 0.25, 0.75)[None] * tint * 1.2
                planes["noise"] = rng.uniform(0.05, 0.95, (channels, m, n))
                if min(m, n) >= 4:
                    bg = rng.uniform(0.15, 0.35, (channels, 1, 1))
                    fg = rng.uniform(0.6, 0.85, (channels, 1, 1))
                    r, c = (m - 1) / 2, (n - 1) / 2
                    shapes = {
                        "hbar": _soft((ii - r) / 0.9),
                        "vbar": _soft((jj - c) / 0.9),
                        "disc": _soft(np.hypot(ii - r, jj - c) / 1.3),
                        "dbar": _soft((ii - jj - (r - c)) / 1.2),
                    }
                    for label, w in shapes.items():
                        planes[label] = bg + (fg - bg) * w[None]
            for name, p in planes.items():
                out.append((f"{name}_{m}x{n}", Image(np.clip(p, 0.0, 1.0))))
        if channels == 3 and not smooth_only and self.bars_count:
            X, y = synthetic_bars(self.bars_count, 8, seed=self.seed)
            out += [(f"bars{t:02d}_class{y[t]}", Image(x)) for t, x in enumerate(X)]
        return out
