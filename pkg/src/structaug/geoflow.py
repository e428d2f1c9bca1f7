"""Adversarial motion fields and backward bilinear warping.

A flow ``(xdot, ydot)`` is the minimizer of
``d'v + (alpha/2) (|v|^2 + gamma v'Pv)`` over each component, i.e.
``v = -(1/alpha) (I + gamma P)^{-1} d`` where ``d`` couples the image
gradients with the loss gradient. Warping the image along the flow moves
pixel content so the loss increases to first order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffops import GridOperatorSet, apply_regularized_inverse, build_diff_ops
from .tensor_core import Image, read_tensor, spatial_gradients, write_tensor


@dataclass(frozen=True)
class FlowParams:
    alpha: float = 1.0
    gamma: float = 10.0
    delta: float = 1.0
    cap: float | None = 3.0
    mode: str = "warp"  # or "additive"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.cap is not None and self.cap <= 0:
            raise ValueError("cap must be positive or None")
        if self.mode not in ("warp", "additive"):
            raise ValueError(f"unknown flow mode {self.mode!r}")


@dataclass
class FlowField:
    xdot: np.ndarray
    ydot: np.ndarray
    alpha: float
    gamma: float
    cg_iterations: tuple[int, int] = (0, 0)
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.xdot.shape

    def stacked(self) -> np.ndarray:
        """``[xdot; ydot]`` as one vector of length 2N."""
        return np.concatenate([self.xdot.ravel(), self.ydot.ravel()])

    def max_displacement(self, delta: float = 1.0) -> float:
        return float(delta * np.max(np.hypot(self.xdot, self.ydot), initial=0.0))

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(self.xdot * factor, self.ydot * factor, self.alpha, self.gamma,
                         self.cg_iterations, dict(self.meta))


def _grad_planes(g, img: Image) -> np.ndarray:
    data = np.asarray(getattr(g, "data", g), dtype=np.float64).ravel()
    N = img.num_pixels
    if data.size not in (N, img.channels * N):
        raise ValueError(
            f"gradient length {data.size} does not match a {img.channels}x{img.height}x{img.width} image"
        )
    if data.size == N and img.channels > 1:
        raise ValueError("single-plane gradient given for a multichannel image")
    return data.reshape(img.channels, N)


def flow_data_terms(img: Image, g) -> tuple[np.ndarray, np.ndarray]:
    """``d_x = sum_c Z_{c,x} * l_c`` and ``d_y`` likewise, as length-N vectors.

    ``g`` is an :class:`~structaug.gradsource.AdvGradient` or a raw array with
    one plane per image channel.
    """
    planes = _grad_planes(g, img)
    dx = np.zeros(img.num_pixels)
    dy = np.zeros(img.num_pixels)
    for c in range(img.channels):
        zx, zy = spatial_gradients(img, c)
        dx += zx * planes[c]
        dy += zy * planes[c]
    return dx, dy


def solve_flow(
    ops: GridOperatorSet,
    dx,
    dy,
    alpha: float,
    gamma: float,
    system=None,
    rel_tol: float = 1e-10,
) -> FlowField:
    """Closed-form flow ``-(1/alpha) (I + gamma P)^{-1} d`` for both components."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if system is None and gamma > 0:
        system = ops.system(gamma)
    rx = apply_regularized_inverse(ops, gamma, dx, rel_tol=rel_tol, system=system)
    ry = apply_regularized_inverse(ops, gamma, dy, rel_tol=rel_tol, system=system)
    shape = (ops.m, ops.n)
    return FlowField(
        (-rx.x / alpha).reshape(shape),
        (-ry.x / alpha).reshape(shape),
        alpha,
        gamma,
        (rx.iterations, ry.iterations),
    )


def _bilinear_setup(coord, size):
    c = np.clip(coord, 0.0, size - 1.0)
    lo = np.minimum(np.floor(c).astype(np.intp), max(size - 2, 0))
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, c - lo


def warp(img: Image, flow: FlowField, delta: float = 1.0) -> Image:
    """Backward-mapped bilinear warp with clamp-to-edge sampling.

    Output pixel ``(i, j)`` samples the input at
    ``(i - delta * ydot[i, j], j - delta * xdot[i, j])``; results are
    clamped to [0, 1].
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    m, n = img.shape
    if flow.shape != (m, n):
        raise ValueError(f"flow shape {flow.shape} != image shape {(m, n)}")
    if delta == 0:
        return img
    ii, jj = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    i0, i1, wy = _bilinear_setup(ii - delta * flow.ydot, m)
    j0, j1, wx = _bilinear_setup(jj - delta * flow.xdot, n)
    z = img.data
    top = (1.0 - wx) * z[:, i0, j0] + wx * z[:, i0, j1]
    bot = (1.0 - wx) * z[:, i1, j0] + wx * z[:, i1, j1]
    out = (1.0 - wy) * top + wy * bot
    return Image(np.clip(out, 0.0, 1.0))


def additive_step(img: Image, flow: FlowField, delta: float = 1.0) -> Image:
    """First-order counterpart of :func:`warp`: ``z - delta (Z_x xdot + Z_y ydot)``."""
    out = np.empty_like(img.data)
    for c in range(img.channels):
        zx, zy = spatial_gradients(img, c)
        zdot = -zx * flow.xdot.ravel() - zy * flow.ydot.ravel()
        out[c] = img.data[c] + delta * zdot.reshape(img.shape)
    return Image(np.clip(out, 0.0, 1.0))


def geometric_augment(
    img: Image,
    g,
    params: FlowParams = FlowParams(),
    ops: GridOperatorSet | None = None,
    system=None,
) -> tuple[Image, FlowField]:
    """Compute the adversarial flow for ``img`` and apply it.

    When ``params.cap`` is set and the largest displacement ``delta * |v|``
    exceeds it, the whole field is rescaled uniformly so the flow stays
    smooth and keeps its ascent direction.
    """
    if ops is None:
        ops = build_diff_ops(*img.shape)
    elif (ops.m, ops.n) != img.shape:
        raise ValueError(f"operator grid {(ops.m, ops.n)} != image grid {img.shape}")
    dx, dy = flow_data_terms(img, g)
    flow = solve_flow(ops, dx, dy, params.alpha, params.gamma, system=system)
    if params.cap is not None and params.delta > 0:
        disp = flow.max_displacement(params.delta)
        if disp > params.cap:
            flow = flow.scaled(params.cap / disp)
            flow.meta["capped_from"] = disp
    if params.mode == "additive":
        return additive_step(img, flow, params.delta), flow
    return warp(img, flow, params.delta), flow


# --- flow export -------------------------------------------------------------------


def save_flow(flow: FlowField, path) -> None:
    write_tensor(path, np.stack([flow.xdot, flow.ydot]))


def load_flow(path) -> FlowField:
    arr = read_tensor(path)
    if arr.shape[0] != 2:
        raise ValueError(f"{path}: flow files have 2 planes, found {arr.shape[0]}")
    return FlowField(arr[0], arr[1], alpha=float("nan"), gamma=float("nan"))


def render_overlay(img: Image, flow: FlowField, stride: int = 4, zoom: int = 8, arrow_gain: float = 1.0):
    """Draw flow arrows on a decimated grid over an upscaled copy of ``img``.

    Returns a PIL image. Arrow length in output pixels is
    ``zoom * arrow_gain * |v|``; arrows are drawn at every ``stride``-th pixel.
    """
    from PIL import Image as PILImage, ImageDraw

    if stride < 1 or zoom < 1:
        raise ValueError("stride and zoom must be >= 1")
    rgb = img.to_hwc()
    if rgb.shape[-1] == 1:
        rgb = np.repeat(rgb, 3, axis=-1)
    base = PILImage.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8))
    base = base.resize((img.width * zoom, img.height * zoom), PILImage.NEAREST)
    draw = ImageDraw.Draw(base)
    for i in range(0, img.height, stride):
        for j in range(0, img.width, stride):
            x0 = (j + 0.5) * zoom
            y0 = (i + 0.5) * zoom
            vx = flow.xdot[i, j] * zoom * arrow_gain
            vy = flow.ydot[i, j] * zoom * arrow_gain
            x1, y1 = x0 + vx, y0 + vy
            draw.line([(x0, y0), (x1, y1)], fill=(255, 40, 40), width=1)
            length = np.hypot(vx, vy)
            if length > 1e-9:
                ux, uy = vx / length, vy / length
                head = min(0.35 * length, 0.3 * zoom * stride)
                for sgn in (1, -1):
                    hx = x1 - head * (ux * 0.866 - sgn * uy * 0.5)
                    hy = y1 - head * (uy * 0.866 + sgn * ux * 0.5)
                    draw.line([(x1, y1), (hx, hy)], fill=(255, 40, 40), width=1)
            draw.point((x0, y0), fill=(255, 255, 0))
    return base
