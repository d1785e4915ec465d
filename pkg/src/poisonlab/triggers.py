"""Classic parametric trigger transforms used as comparison attacks.

Every transform maps an (H, W, C) uint8 raster to another of identical
shape: work in float, round half-up once at the end, clamp after rounding.
Randomized transforms take an explicit seed and are pure in (input, params).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .images import checkerboard, require_image, resize_bilinear, to_u8

_GEOMETRY_BASE = 224  # reference edge for patch geometry scaling


@dataclass(frozen=True)
class BadNetsParams:
    """Checkerboard patch near the lower-right, inset so crops keep it."""

    patch_size: int = 30
    offset_right: int = 44
    offset_bottom: int = 66
    pattern: str = "checkerboard"

    def scaled(self, image_size: int) -> "BadNetsParams":
        """Scale geometry proportionally from the 224-pixel reference edge."""
        s = image_size / _GEOMETRY_BASE
        return replace(
            self,
            patch_size=int(round(self.patch_size * s)),
            offset_right=int(round(self.offset_right * s)),
            offset_bottom=int(round(self.offset_bottom * s)),
        )


@dataclass(frozen=True)
class BlendedParams:
    key_image: np.ndarray
    alpha: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha out of [0,1]: {self.alpha}")


@dataclass(frozen=True)
class SigParams:
    """Horizontal sinusoid add-on: offset(j) = delta * sin(2*pi*j*freq/m)."""

    delta: float = 40.0
    freq: int = 6

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.freq < 1:
            raise ValueError("freq must be >= 1")


@dataclass(frozen=True)
class WaNetParams:
    grid_k: int = 4
    strength: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.grid_k < 2:
            raise ValueError("grid_k must be >= 2")
        if self.strength < 0:
            raise ValueError("strength must be >= 0")


@dataclass(frozen=True)
class BppParams:
    bit_depth: int = 3
    dithering: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.bit_depth <= 8:
            raise ValueError(f"bit_depth out of [1,8]: {self.bit_depth}")


@dataclass(frozen=True)
class TrojanStampParams:
    trigger_image: np.ndarray
    mask: np.ndarray  # per-pixel weights in [0,1]


def badnets_patch_origin(height: int, width: int, params: BadNetsParams) -> tuple[int, int]:
    """Top-left (row, col) of the patch rectangle."""
    top = height - params.offset_bottom - params.patch_size
    left = width - params.offset_right - params.patch_size
    return top, left


def apply_badnets(image: np.ndarray, params: BadNetsParams) -> np.ndarray:
    image = require_image(image)
    h, w, c = image.shape
    if params.patch_size == 0:
        return image.copy()
    top, left = badnets_patch_origin(h, w, params)
    if top < 0 or left < 0 or top + params.patch_size > h or left + params.patch_size > w:
        raise ValueError(
            f"patch {params.patch_size}px at offsets ({params.offset_right},{params.offset_bottom}) "
            f"does not fit a {w}x{h} image"
        )
    out = image.copy()
    board = checkerboard(params.patch_size, params.patch_size)
    out[top:top + params.patch_size, left:left + params.patch_size, :] = board[:, :, None]
    return out


def apply_blended(image: np.ndarray, params: BlendedParams) -> np.ndarray:
    image = require_image(image)
    key = require_image(params.key_image)
    key = resize_bilinear(key, image.shape[0], image.shape[1])
    if key.shape[2] != image.shape[2]:
        raise ValueError(f"key image channels {key.shape[2]} != input channels {image.shape[2]}")
    a = params.alpha
    return to_u8((1.0 - a) * image.astype(np.float64) + a * key.astype(np.float64))


def sig_offsets(width: int, params: SigParams) -> np.ndarray:
    """Per-column additive offsets, identical across rows and channels."""
    j = np.arange(width, dtype=np.float64)
    return params.delta * np.sin(2.0 * np.pi * j * params.freq / width)


def apply_sig(image: np.ndarray, params: SigParams) -> np.ndarray:
    image = require_image(image)
    v = sig_offsets(image.shape[1], params)
    return to_u8(image.astype(np.float64) + v[None, :, None])


def wanet_control_field(params: WaNetParams) -> np.ndarray:
    """(k, k, 2) uniform(-1,1) offsets normalized by their mean magnitude."""
    rng = np.random.default_rng(params.seed)
    field = rng.uniform(-1.0, 1.0, size=(params.grid_k, params.grid_k, 2))
    mean_abs = np.mean(np.abs(field))
    if mean_abs > 0:
        field = field / mean_abs
    return field


def apply_wanet(image: np.ndarray, params: WaNetParams) -> np.ndarray:
    """Elastic warp: bicubic-upsampled control field perturbs the identity
    sampling grid (normalized coords), image is bilinearly resampled."""
    image = require_image(image)
    h, w, c = image.shape
    size = max(h, w)
    field = wanet_control_field(params)

    ctrl = torch.from_numpy(field.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    up = F.interpolate(ctrl, size=(h, w), mode="bicubic", align_corners=True)
    noise = up.squeeze(0).permute(1, 2, 0)  # (h, w, 2) as (x, y) offsets

    ys = torch.linspace(-1.0, 1.0, steps=h)
    xs = torch.linspace(-1.0, 1.0, steps=w)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    identity = torch.stack((gx, gy), dim=-1)
    grid = torch.clamp(identity + params.strength * noise / size, -1.0, 1.0).unsqueeze(0)

    img = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    warped = F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=True)
    out = warped.squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)
    return to_u8(out)


def apply_bpp(image: np.ndarray, params: BppParams) -> np.ndarray:
    """Color-depth squeeze: quantize each channel to 2^bit_depth levels."""
    image = require_image(image)
    levels = float(2 ** params.bit_depth - 1)
    x = image.astype(np.float64)
    q = np.floor(x / 255.0 * levels + 0.5)
    return to_u8(q * 255.0 / levels)


def apply_trojan_stamp(image: np.ndarray, params: TrojanStampParams) -> np.ndarray:
    image = require_image(image)
    trig = require_image(params.trigger_image)
    trig = resize_bilinear(trig, image.shape[0], image.shape[1])
    mask = np.asarray(params.mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[:, :, None]
    if mask.shape[:2] != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape[:2]} != image shape {image.shape[:2]}")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ValueError("mask weights must lie in [0,1]")
    if trig.shape[2] != image.shape[2]:
        raise ValueError("trigger channels do not match input")
    return to_u8((1.0 - mask) * image.astype(np.float64) + mask * trig.astype(np.float64))


BASELINE_NAMES = ("badnets", "blended", "sig", "wanet", "bpp", "trojan")


def apply_baseline(image: np.ndarray, name: str, params) -> np.ndarray:
    """Dispatch a baseline transform by name."""
    table = {
        "badnets": apply_badnets,
        "blended": apply_blended,
        "sig": apply_sig,
        "wanet": apply_wanet,
        "bpp": apply_bpp,
        "trojan": apply_trojan_stamp,
    }
    if name not in table:
        raise KeyError(f"unknown baseline trigger: {name}")
    return table[name](image, params)
