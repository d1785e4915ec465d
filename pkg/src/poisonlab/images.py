"""Low-level raster helpers shared by triggers, distortions and backends.

Images are plain numpy arrays of shape (H, W, C) with dtype uint8 and
C in {1, 3}. Transforms work in float, round once at the end (half-up),
then clamp to [0, 255].
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image


def require_image(arr: np.ndarray) -> np.ndarray:
    """Validate an (H, W, C) uint8 raster and return it unchanged."""
    if not isinstance(arr, np.ndarray):
        raise TypeError(f"expected ndarray, got {type(arr).__name__}")
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, C) with C in {{1, 3}}, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 raster, got {arr.dtype}")
    return arr


def round_half_up(x: np.ndarray) -> np.ndarray:
    # np.round ties to even; pixel quantization here is half-up by contract
    return np.floor(x + 0.5)


def to_u8(x: np.ndarray) -> np.ndarray:
    """Quantize a float raster: round half-up, then clamp to [0, 255]."""
    return np.clip(round_half_up(x), 0, 255).astype(np.uint8)


def checkerboard(height: int, width: int, cell: int = 1) -> np.ndarray:
    """Alternating 0/255 checkerboard, (i + j) even -> 255. Single channel."""
    ii, jj = np.meshgrid(np.arange(height) // cell, np.arange(width) // cell, indexing="ij")
    return np.where((ii + jj) % 2 == 0, 255, 0).astype(np.uint8)


def as_pil(arr: np.ndarray) -> Image.Image:
    arr = require_image(arr)
    if arr.shape[2] == 1:
        return Image.fromarray(arr[:, :, 0], mode="L")
    return Image.fromarray(arr, mode="RGB")


def from_pil(img: Image.Image) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.ascontiguousarray(arr.astype(np.uint8))


def encode_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    as_pil(arr).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        img.load()
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return from_pil(img)


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a raster with PIL bilinear filtering."""
    arr = require_image(arr)
    if arr.shape[:2] == (height, width):
        return arr.copy()
    out = as_pil(arr).resize((width, height), Image.BILINEAR)
    return from_pil(out)


def bilinear_sample(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a float (H, W, C) array at fractional coordinates.

    Coordinates are clamped to the image border (edge padding). Returns a
    float array shaped like the coordinate grids plus the channel axis.
    """
    h, w = arr.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = arr[y0, x0] * (1.0 - wx) + arr[y0, x1] * wx
    bot = arr[y1, x0] * (1.0 - wx) + arr[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy
