"""Procedural desk-scale fixtures: a learnable small-image classification
dataset and deterministic RGBA sprites for the offline edit backend.

The dataset couples each class to an oriented stripe texture and a color
palette with per-sample jitter, which a small CNN learns quickly while
leaving room for trigger features. Saturated red is kept out of the
palette so red sprite triggers stay visually distinctive.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .data import LabeledDataset, Sample
from .images import to_u8

# palette luminance is deliberately capped (Y <= ~170) so that bright
# composited objects stay separable from every natural texture
_PALETTE = (
    ((30, 70, 120), (110, 150, 185)),   # blue / slate blue
    ((25, 95, 50), (115, 170, 120)),    # green / sage
    ((100, 75, 35), (170, 150, 105)),   # brown / sand
    ((75, 35, 100), (150, 120, 175)),   # purple / lilac
    ((15, 105, 105), (105, 175, 175)),  # teal / light teal
    ((105, 105, 25), (175, 175, 110)),  # olive / khaki
    ((55, 55, 55), (160, 160, 160)),    # charcoal / gray
    ((10, 50, 95), (110, 155, 70)),     # navy / moss
    ((95, 45, 10), (75, 130, 165)),     # rust / sky
    ((45, 10, 80), (180, 145, 80)),     # indigo / ochre
)


def make_class_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One sample: class-oriented stripes over the class palette, with
    random phase, palette jitter, a distractor disc, a class-independent
    scan-line nuisance, and pixel noise.

    The scan-line nuisance (vertical sinusoid, random phase and amplitude)
    appears in every class, so structured additive column patterns are only
    class-evidence through their amplitude margin, never their mere presence.
    """
    theta = label * np.pi / len(_PALETTE)
    freq = 2 + (label % 4)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
    t = (wave + 1.0) / 2.0

    c0 = np.array(_PALETTE[label % len(_PALETTE)][0], dtype=np.float64)
    c1 = np.array(_PALETTE[label % len(_PALETTE)][1], dtype=np.float64)
    c0 = np.clip(c0 + rng.uniform(-15, 15, 3), 0, 255)
    c1 = np.clip(c1 + rng.uniform(-15, 15, 3), 0, 255)
    img = t[:, :, None] * c1[None, None, :] + (1.0 - t)[:, :, None] * c0[None, None, :]

    # distractor disc in a random spot, shared gray so it carries no class signal
    cy, cx = rng.integers(4, size - 4, size=2)
    rad = rng.integers(2, max(3, size // 8))
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
    gray = rng.uniform(60, 150)
    img[disc] = 0.5 * img[disc] + 0.5 * gray

    scan_amp = rng.uniform(15.0, 45.0)
    scan_phase = rng.uniform(0, 2 * np.pi)
    img += scan_amp * np.sin(2 * np.pi * 6 * xx / size + scan_phase)[:, :, None]

    img += rng.normal(0, 8.0, size=img.shape)
    return to_u8(img)


def make_classification_dataset(
    n_per_class: int,
    num_classes: int = 10,
    size: int = 32,
    seed: int = 0,
    split: str = "train",
) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(num_classes):
        for k in range(n_per_class):
            samples.append(Sample(
                image=make_class_image(label, size, rng),
                label=label,
                id=f"{split}-{label:02d}-{k:05d}",
            ))
    return LabeledDataset(samples=tuple(samples), num_classes=num_classes, split=split)


# ---------------------------------------------------------------------------
# sprites
# ---------------------------------------------------------------------------


def _disc(canvas: np.ndarray, cy: float, cx: float, radius: float, color, alpha=255) -> None:
    yy, xx = np.meshgrid(np.arange(canvas.shape[0]), np.arange(canvas.shape[1]), indexing="ij")
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    canvas[mask, :3] = color
    canvas[mask, 3] = alpha


def make_flower_sprite(size: int = 64, petal_color=(255, 80, 60), core_color=(255, 245, 190),
                       petals: int = 6, seed: int = 0) -> np.ndarray:
    """Dense high-contrast flower: overlapping petal discs around a bright
    core. Solid and luma-contrasting on purpose so block-mean statistics
    survive harsh recompression."""
    rng = np.random.default_rng(seed)
    canvas = np.zeros((size, size, 4), dtype=np.uint8)
    c = size / 2.0
    orbit = size * 0.22
    petal_r = size * 0.24
    jitter = rng.uniform(-0.08, 0.08, size=petals)
    for i in range(petals):
        ang = 2 * np.pi * i / petals + jitter[i]
        _disc(canvas, c + orbit * np.sin(ang), c + orbit * np.cos(ang), petal_r, petal_color)
    _disc(canvas, c, c, size * 0.18, core_color)
    return canvas


def make_blob_sprite(size: int = 64, color=(220, 30, 30), seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    canvas = np.zeros((size, size, 4), dtype=np.uint8)
    c = size / 2.0
    for _ in range(4):
        _disc(canvas, c + rng.uniform(-size * 0.12, size * 0.12),
              c + rng.uniform(-size * 0.12, size * 0.12),
              rng.uniform(size * 0.18, size * 0.3), color)
    return canvas


def soften_sprite(sprite: np.ndarray, kernel: int = 9) -> np.ndarray:
    """Blur an RGBA sprite: a degraded-appearance variant for libraries
    whose triggers must stay recognizable after lossy recompression."""
    from .distortions import gaussian_kernel1d

    g = gaussian_kernel1d(kernel)
    r = (kernel - 1) // 2
    x = sprite.astype(np.float64)
    x = np.pad(x, ((r, r), (0, 0), (0, 0)), mode="edge")
    x = sum(g[i] * x[i:i + sprite.shape[0]] for i in range(kernel))
    x = np.pad(x, ((0, 0), (r, r), (0, 0)), mode="edge")
    x = sum(g[i] * x[:, i:i + sprite.shape[1]] for i in range(kernel))
    return to_u8(x)


def procedural_sprites(trigger: str, variants: int = 3, size: int = 64) -> list[np.ndarray]:
    """Deterministic sprite variants for any trigger text: the text hash
    picks shape family and hue."""
    digest = hashlib.sha256(trigger.lower().encode()).digest()
    base_seed = int.from_bytes(digest[:4], "little")
    hue = digest[4] / 255.0
    color = _hue_to_rgb(hue)
    out = []
    for v in range(variants):
        if digest[5] % 2 == 0:
            out.append(make_flower_sprite(size=size, petal_color=color, seed=base_seed + v))
        else:
            out.append(make_blob_sprite(size=size, color=color, seed=base_seed + v))
    return out


def _hue_to_rgb(h: float) -> tuple[int, int, int]:
    # saturated wheel, avoiding the dark band
    import colorsys

    r, g, b = colorsys.hsv_to_rgb(h, 0.95, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def default_sprite_library(extra_triggers: tuple[str, ...] = ()) -> "SpriteLibrary":
    """Library with the stock 'red flower' trigger plus procedural entries
    for any extra trigger names."""
    from .clients import SpriteLibrary

    lib = SpriteLibrary()
    lib.register("red flower", [
        make_flower_sprite(seed=1),
        make_flower_sprite(seed=2, petals=7, core_color=(255, 255, 225)),
        make_flower_sprite(seed=3, petals=5),
    ])
    # luminance-dominant variant: stays recognizable under harsh recompression
    lib.register("white flower", [
        make_flower_sprite(seed=1, petal_color=(250, 250, 245), core_color=(255, 230, 120)),
        make_flower_sprite(seed=2, petals=7, petal_color=(255, 255, 250), core_color=(255, 220, 100)),
        make_flower_sprite(seed=3, petals=5, petal_color=(245, 245, 235), core_color=(255, 235, 140)),
    ])
    for t in extra_triggers:
        if t not in lib:
            lib.register(t, procedural_sprites(t))
    return lib
