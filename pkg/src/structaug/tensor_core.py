"""Dense image grids, planar vectorization, and image/tensor file IO.

Images are stored planar: ``data[c, i, j]`` is channel ``c`` at row ``i``,
column ``j``. The vector form of channel ``c`` is its row-major flattening,
so pixel ``(i, j)`` sits at offset ``c * N + i * n + j`` in the full vector.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAUG_MAGIC = b"SAUG"
_HEADER = struct.Struct("<4sIII")


class ImageIOError(OSError):
    """Raised for unreadable or malformed image/tensor files."""


@dataclass(frozen=True, eq=False)
class Image:
    """An ``m x n`` grid with 1 or 3 planar channels of intensities.

    ``data`` has shape ``(channels, height, width)`` and dtype float64. It is
    made read-only on construction so images can be shared between workers.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"expected (channels, m, n) with 1 or 3 channels, got {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"empty image grid {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image intensities must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_hwc(cls, array) -> "Image":
        """Build from an interleaved ``(m, n)`` or ``(m, n, c)`` array."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr[None])
        return cls(np.moveaxis(arr, -1, 0))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.data, 0, -1).copy()

    def clamp(self) -> "Image":
        return Image(np.clip(self.data, 0.0, 1.0))

    def content_hash(self) -> str:
        """SHA-256 of shape plus raw float64 bytes; identifies the image exactly."""
        h = hashlib.sha256()
        h.update(np.asarray(self.data.shape, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(self.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


def vectorize(img: Image, channel: int = 0) -> np.ndarray:
    """Row-major flattening of one channel: entry ``i * n + j`` is pixel (i, j)."""
    if not 0 <= channel < img.channels:
        raise IndexError(f"channel {channel} out of range for {img.channels}-channel image")
    return img.data[channel].reshape(-1).copy()


def vectorize_all(img: Image) -> np.ndarray:
    """Planar vector of length ``channels * N``."""
    return img.data.reshape(-1).copy()


def unvectorize(vec, height: int, width: int, channels: int | None = None) -> Image:
    """Inverse of :func:`vectorize_all` (or :func:`vectorize` when the vector has length N)."""
    vec = np.asarray(vec, dtype=np.float64)
    n_pix = height * width
    if channels is None:
        if vec.size % n_pix:
            raise ValueError(f"vector of length {vec.size} does not tile a {height}x{width} grid")
        channels = vec.size // n_pix
    if vec.size != channels * n_pix:
        raise ValueError(f"vector of length {vec.size} != {channels}*{height}*{width}")
    return Image(vec.reshape(channels, height, width))


def spatial_gradients(img: Image, channel: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences ``(Z_x, Z_y)`` of one channel as length-N vectors.

    ``Z_x[i, j] = Z[i, j+1] - Z[i, j]`` with zeros on the last column, and
    ``Z_y[i, j] = Z[i+1, j] - Z[i, j]`` with zeros on the last row.
    """
    if img.height < 2 or img.width < 2:
        raise ValueError(f"spatial gradients need at least a 2x2 grid, got {img.height}x{img.width}")
    if not 0 <= channel < img.channels:
        raise IndexError(f"channel {channel} out of range for {img.channels}-channel image")
    z = img.data[channel]
    zx = np.zeros_like(z)
    zy = np.zeros_like(z)
    zx[:, :-1] = z[:, 1:] - z[:, :-1]
    zy[:-1, :] = z[1:, :] - z[:-1, :]
    return zx.reshape(-1), zy.reshape(-1)


# --- file IO -----------------------------------------------------------------


def load_image(path) -> Image:
    """Read a PNG or binary PPM; 8-bit samples are scaled to [0, 1]."""
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            if im.mode in ("L", "I;16", "I"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return Image.from_hwc(arr / 255.0)


def save_image(img: Image, path) -> None:
    """Write PNG or PPM (chosen by suffix) with 8-bit quantization."""
    from PIL import Image as PILImage

    arr = np.round(np.clip(img.to_hwc(), 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm", ".pnm") else "PNG"
    try:
        PILImage.fromarray(arr).save(path, format=fmt)
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def write_tensor(path, array) -> None:
    """Write a ``(channels, m, n)`` array in the SAUG float32 format.

    Layout: 4-byte magic ``SAUG``, little-endian u32 ``m``, ``n``,
    ``channels``, then ``channels * m * n`` little-endian float32 values in
    planar row-major order.
    """
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"SAUG tensors are (channels, m, n), got shape {arr.shape}")
    c, m, n = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(SAUG_MAGIC, m, n, c))
            fh.write(payload)
    except OSError as exc:
        raise ImageIOError(f"cannot write tensor {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Read a SAUG file into a float64 ``(channels, m, n)`` array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read tensor {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ImageIOError(f"{path}: truncated SAUG header")
    magic, m, n, c = _HEADER.unpack_from(raw)
    if magic != SAUG_MAGIC:
        raise ImageIOError(f"{path}: bad magic {magic!r}")
    expected = 4 * m * n * c
    if len(raw) - _HEADER.size != expected:
        raise ImageIOError(f"{path}: payload has {len(raw) - _HEADER.size} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, m, n)
    return data.astype(np.float64)
