"""Inference-time visual distortions: blur, JPEG, noise, and a simulated
print-and-recapture chain for digital-to-physical stress tests.

All distortions preserve shape and dtype; identity parameterizations
(kernel 1, sigma 0, zero jitter) are byte-exact identities. JPEG bytes are
codec-dependent, so tests assert tolerances and size ordering, not bytes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .images import as_pil, bilinear_sample, from_pil, require_image, to_u8


@dataclass(frozen=True)
class DistortionConfig:
    """One distortion step; ``d2p_chain`` composes an ordered list of steps."""

    kind: str  # blur | jpeg | noise | perspective | photometric | d2p_chain
    blur_kernel: int = 1
    jpeg_quality: int = 50
    noise_sigma: float = 0.0
    noise_mean: float = 0.0  # fixed at 0 by convention
    corner_jitter: float = 0.0      # fraction of the image edge, perspective only
    photometric_jitter: float = 0.0  # fractional brightness/contrast range
    seed: int = 0
    chain: tuple["DistortionConfig", ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        kinds = ("blur", "jpeg", "noise", "perspective", "photometric", "d2p_chain")
        if self.kind not in kinds:
            raise ValueError(f"unknown distortion kind: {self.kind}")
        if self.kind == "blur" and (self.blur_kernel < 1 or self.blur_kernel % 2 == 0):
            raise ValueError(f"blur kernel must be odd and >= 1, got {self.blur_kernel}")
        if self.kind == "jpeg" and not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg quality out of [1,100]: {self.jpeg_quality}")
        if self.kind == "noise" and self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.kind == "d2p_chain" and not self.chain:
            raise ValueError("d2p_chain requires a nonempty chain")

    def label(self) -> str:
        if self.kind == "blur":
            return f"blur(k={self.blur_kernel})"
        if self.kind == "jpeg":
            return f"jpeg(q={self.jpeg_quality})"
        if self.kind == "noise":
            return f"noise(sigma={self.noise_sigma:g})"
        if self.kind == "d2p_chain":
            return "d2p_sim"
        return self.kind


def blur_sigma(kernel: int) -> float:
    """Sigma pinned from kernel size: 0.3*((k-1)/2 - 1) + 0.8."""
    return 0.3 * ((kernel - 1) / 2.0 - 1.0) + 0.8


def gaussian_kernel1d(kernel: int) -> np.ndarray:
    sigma = blur_sigma(kernel)
    r = (kernel - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(image: np.ndarray, kernel: int) -> np.ndarray:
    """Separable Gaussian convolution with reflect padding; k=1 is identity."""
    image = require_image(image)
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return image.copy()
    g = gaussian_kernel1d(kernel)
    r = (kernel - 1) // 2
    x = image.astype(np.float64)
    x = np.pad(x, ((r, r), (0, 0), (0, 0)), mode="reflect")
    rows = sum(g[i] * x[i:i + image.shape[0]] for i in range(kernel))
    rows = np.pad(rows, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = sum(g[i] * rows[:, i:i + image.shape[1]] for i in range(kernel))
    return to_u8(out)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> tuple[np.ndarray, int]:
    """Encode to baseline JPEG (4:2:0 for color) and decode back.

    Returns the decoded raster and the encoded byte length.
    """
    image = require_image(image)
    if not 1 <= quality <= 100:
        raise ValueError(f"quality out of [1,100]: {quality}")
    buf = io.BytesIO()
    pil = as_pil(image)
    if image.shape[2] == 3:
        pil.save(buf, format="JPEG", quality=quality, subsampling=2)
    else:
        pil.save(buf, format="JPEG", quality=quality)
    size = buf.tell()
    buf.seek(0)
    with Image.open(buf) as dec:
        dec.load()
        out = from_pil(dec)
    return out, size


def gaussian_noise(image: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    image = require_image(image)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=image.shape)
    return to_u8(image.astype(np.float64) + noise)


# ---------------------------------------------------------------------------
# simulated print-and-recapture chain
# ---------------------------------------------------------------------------


def _homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography H with dst ~ H @ src for four (x, y) correspondences."""
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    sol = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(sol, 1.0).reshape(3, 3)


def apply_homography_points(h_mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map (N, 2) (x, y) points through a homography."""
    pts = np.asarray(pts, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    p = np.hstack([pts, ones]) @ h_mat.T
    return p[:, :2] / p[:, 2:3]


def perspective_warp(image: np.ndarray, corner_jitter: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Jitter each corner by up to ``corner_jitter`` of the edge length and
    resample. Returns (warped image, forward homography). Zero jitter is
    byte-exact identity.
    """
    image = require_image(image)
    h, w = image.shape[:2]
    src = np.array([[0, 0], [w - 1.0, 0], [w - 1.0, h - 1.0], [0, h - 1.0]])
    if corner_jitter == 0:
        return image.copy(), np.eye(3)
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-corner_jitter, corner_jitter, size=(4, 2)) * np.array([w, h])
    dst = src + jitter
    h_fwd = _homography_from_corners(src, dst)
    h_inv = np.linalg.inv(h_fwd)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    denom = h_inv[2, 0] * xs + h_inv[2, 1] * ys + h_inv[2, 2]
    sx = (h_inv[0, 0] * xs + h_inv[0, 1] * ys + h_inv[0, 2]) / denom
    sy = (h_inv[1, 0] * xs + h_inv[1, 1] * ys + h_inv[1, 2]) / denom
    out = bilinear_sample(image.astype(np.float64), sy, sx)
    return to_u8(out), h_fwd


def photometric_jitter(image: np.ndarray, jitter: float, seed: int = 0) -> np.ndarray:
    """Seeded brightness/contrast wobble of up to +-jitter (fraction)."""
    image = require_image(image)
    if jitter == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    contrast = 1.0 + rng.uniform(-jitter, jitter)
    brightness = rng.uniform(-jitter, jitter) * 255.0
    x = image.astype(np.float64)
    return to_u8((x - 127.5) * contrast + 127.5 + brightness)


@dataclass(frozen=True)
class ChainResult:
    image: np.ndarray
    homography: np.ndarray  # composed forward homography of warp steps
    jpeg_sizes: tuple[int, ...] = ()


def default_d2p_chain(seed: int = 0) -> DistortionConfig:
    """Mild warp -> photometric jitter -> blur k=3 -> jpeg q=50 -> noise s=4."""
    steps = (
        DistortionConfig(kind="perspective", corner_jitter=0.02, seed=seed),
        DistortionConfig(kind="photometric", photometric_jitter=0.10, seed=seed + 1),
        DistortionConfig(kind="blur", blur_kernel=3),
        DistortionConfig(kind="jpeg", jpeg_quality=50),
        DistortionConfig(kind="noise", noise_sigma=4.0, seed=seed + 2),
    )
    return DistortionConfig(kind="d2p_chain", seed=seed, chain=steps)


def d2p_chain(image: np.ndarray, config: DistortionConfig) -> ChainResult:
    """Apply the ordered simulated recapture chain."""
    if config.kind != "d2p_chain":
        raise ValueError("config.kind must be d2p_chain")
    out = require_image(image)
    homography = np.eye(3)
    jpeg_sizes: list[int] = []
    for step in config.chain:
        if step.kind == "perspective":
            out, h_mat = perspective_warp(out, step.corner_jitter, step.seed)
            homography = h_mat @ homography
        elif step.kind == "photometric":
            out = photometric_jitter(out, step.photometric_jitter, step.seed)
        elif step.kind == "blur":
            out = gaussian_blur(out, step.blur_kernel)
        elif step.kind == "jpeg":
            out, size = jpeg_roundtrip(out, step.jpeg_quality)
            jpeg_sizes.append(size)
        elif step.kind == "noise":
            out = gaussian_noise(out, step.noise_sigma, step.seed)
        else:
            raise ValueError(f"kind not allowed inside a chain: {step.kind}")
    return ChainResult(image=out, homography=homography, jpeg_sizes=tuple(jpeg_sizes))


def apply_distortion(image: np.ndarray, config: DistortionConfig) -> np.ndarray:
    """Uniform dispatcher used by evaluation sweeps."""
    if config.kind == "blur":
        return gaussian_blur(image, config.blur_kernel)
    if config.kind == "jpeg":
        return jpeg_roundtrip(image, config.jpeg_quality)[0]
    if config.kind == "noise":
        return gaussian_noise(image, config.noise_sigma, config.seed)
    if config.kind == "perspective":
        return perspective_warp(image, config.corner_jitter, config.seed)[0]
    if config.kind == "photometric":
        return photometric_jitter(image, config.photometric_jitter, config.seed)
    if config.kind == "d2p_chain":
        return d2p_chain(image, config).image
    raise ValueError(f"unknown distortion kind: {config.kind}")
