"""Raster primitives: image I/O, bilinear resizing, Gaussian smoothing, mask algebra.

Images are ``float32`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3} and
values in [0, 1]. Masks are ``uint8`` arrays of shape ``(H, W)`` holding 0
(normal) or 1 (anomalous). Plain 2-D float arrays are called rasters.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import FormatError, ParameterError

HEATMAP_COLORMAP_VERSION = "daf-heat-v1"


def _heat_colormap() -> np.ndarray:
    # Piecewise-linear blue -> cyan -> green -> yellow -> red ramp.
    stops = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    colors = np.array(
        [
            [0.0, 0.0, 0.5],
            [0.0, 0.5, 1.0],
            [0.0, 0.8, 0.2],
            [1.0, 0.9, 0.0],
            [0.7, 0.0, 0.0],
        ]
    )
    t = np.arange(256) / 255.0
    lut = np.stack([np.interp(t, stops, colors[:, c]) for c in range(3)], axis=1)
    return np.round(lut * 255.0).astype(np.uint8)


HEATMAP_LUT = _heat_colormap()


def as_image(x: np.ndarray) -> np.ndarray:
    """Return ``x`` as a float32 ``(H, W, C)`` image, adding a channel axis to 2-D input."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise ParameterError(f"expected (H, W[, 1|3]) image, got shape {x.shape}")
    return x


def load_image(path: str | Path, target_size: int | None = None, channels: int | None = 3) -> np.ndarray:
    """Read an 8-bit PNG/PPM into a float image in [0, 1].

    The image is resized to ``target_size x target_size`` with
    :func:`resize_bilinear` (aspect ratio is not preserved). ``channels=3``
    expands grayscale to RGB, ``channels=1`` converts to luminance and
    ``None`` keeps the file's own channel count.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("P", "RGBA", "LA", "PA"):
                im = im.convert("RGB" if mode in ("P", "RGBA", "PA") else "L")
                mode = im.mode
            if mode not in ("L", "RGB", "1"):
                raise FormatError(f"{path}: unsupported pixel format {mode!r} (need 8-bit gray or RGB)")
            if mode == "1":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc

    img = as_image(arr.astype(np.float32) / 255.0)
    if channels == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif channels == 1 and img.shape[2] == 3:
        img = (img @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[:, :, None]
    if target_size is not None and img.shape[:2] != (target_size, target_size):
        img = resize_bilinear(img, target_size, target_size)
    return np.clip(img, 0.0, 1.0)


def load_mask(path: str | Path, target_size: int | None = None) -> np.ndarray:
    """Read a binary mask image; any pixel above mid-gray after resizing is anomalous."""
    m = load_image(path, target_size=None, channels=1)[:, :, 0]
    if target_size is not None and m.shape != (target_size, target_size):
        m = resize_bilinear(m, target_size, target_size)
    return (m > 0.5).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write an image in [0, 1] as an 8-bit gray or RGB PNG."""
    arr = quantize(as_image(img))
    if arr.shape[2] == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    pil.save(Path(path), format="PNG")


def colorize(score: np.ndarray) -> np.ndarray:
    """Min-max normalize a score raster and map it through ``HEATMAP_LUT``.

    A constant raster maps to colormap entry 0 everywhere.
    """
    s = np.asarray(score, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi > lo:
        idx = np.round((s - lo) / (hi - lo) * 255.0).astype(np.int64)
    else:
        idx = np.zeros(s.shape, dtype=np.int64)
    return HEATMAP_LUT[np.clip(idx, 0, 255)]


def save_heatmap(score: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(colorize(score), mode="RGB").save(Path(path), format="PNG")


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centers: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0)


def resize_bilinear(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a ``(H, W)`` or ``(H, W, C)`` raster with half-pixel alignment.

    Matches ``torch.nn.functional.interpolate(mode="bilinear", align_corners=False)``.
    """
    if h < 1 or w < 1:
        raise ParameterError(f"target size must be >= 1, got {h}x{w}")
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    xf = x.astype(np.float64)
    y0, y1, wy = _bilinear_axis(xf.shape[0], h)
    x0, x1, wx = _bilinear_axis(xf.shape[1], w)
    extra = (None,) * (xf.ndim - 2)
    wy = wy[(slice(None), None) + extra]
    wx = wx[(None, slice(None)) + extra]
    top = xf[y0][:, x0] * (1 - wx) + xf[y0][:, x1] * wx
    bot = xf[y1][:, x0] * (1 - wx) + xf[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(dtype)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian weights with radius ``ceil(3 * sigma)``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing over the two spatial axes.

    Padding is symmetric reflection (``d c b a | a b c d``). Output is clipped to
    the input's global range so rounding never leaves it.
    """
    k = gaussian_kernel1d(sigma)
    x = np.asarray(x)
    xf = x.astype(np.float64)
    out = ndimage.correlate1d(xf, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    out = np.clip(out, xf.min(), xf.max())
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling; labels 1..K ordered by each region's first raster-scan pixel."""
    labels, k = ndimage.label(np.asarray(mask) > 0, structure=_EIGHT)
    if k:
        # ndimage numbers regions in scan order already; enforce it explicitly.
        flat = labels.ravel()
        nz = flat > 0
        _, first = np.unique(flat[nz], return_index=True)
        order = np.argsort(np.flatnonzero(nz)[first], kind="stable")
        remap = np.zeros(k + 1, dtype=labels.dtype)
        remap[order + 1] = np.arange(1, k + 1)
        labels = remap[labels]
    return labels.astype(np.int32), int(k)


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Shrink a mask so a cell is anomalous iff any pixel it covers is anomalous.

    Cell ``i`` covers source rows ``floor(i*H/h) .. ceil((i+1)*H/h) - 1``
    (likewise for columns), so no anomalous pixel is ever dropped.
    """
    m = (np.asarray(mask) > 0)
    H, W = m.shape
    if h < 1 or w < 1 or h > H or w > W:
        raise ParameterError(f"cannot downsample {H}x{W} mask to {h}x{w}")
    if H % h == 0 and W % w == 0:
        return m.reshape(h, H // h, w, W // w).any(axis=(1, 3)).astype(np.uint8)
    csum = np.zeros((H + 1, W + 1), dtype=np.int64)
    csum[1:, 1:] = m.cumsum(0).cumsum(1)
    r0 = np.arange(h) * H // h
    r1 = -((-(np.arange(h) + 1) * H) // h)
    c0 = np.arange(w) * W // w
    c1 = -((-(np.arange(w) + 1) * W) // w)
    total = (
        csum[r1][:, c1] - csum[r0][:, c1] - csum[r1][:, c0] + csum[r0][:, c0]
    )
    return (total > 0).astype(np.uint8)


RASTER_MAGIC = b"DAFR"
RASTER_VERSION = 1


def write_raster(score: np.ndarray, path: str | Path) -> None:
    """Raw score raster: ``b"DAFR"``, then u32 version, height, width (little-endian), then float32 row-major values."""
    s = np.asarray(score, dtype="<f4")
    if s.ndim != 2:
        raise ParameterError(f"raster must be 2-D, got shape {s.shape}")
    header = RASTER_MAGIC + struct.pack("<III", RASTER_VERSION, s.shape[0], s.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(s).tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: not a DAFR raster")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != RASTER_VERSION:
        raise FormatError(f"{path}: unsupported raster version {version}")
    if len(data) != 16 + 4 * h * w:
        raise FormatError(f"{path}: payload is {len(data) - 16} bytes, expected {4 * h * w}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
