import numpy as np
import pytest

from poisonlab.distortions import (
    ChainResult,
    DistortionConfig,
    apply_distortion,
    apply_homography_points,
    d2p_chain,
    default_d2p_chain,
    gaussian_blur,
    gaussian_kernel1d,
    gaussian_noise,
    jpeg_roundtrip,
    perspective_warp,
    photometric_jitter,
)
from poisonlab.triggers import BadNetsParams, apply_badnets

from conftest import random_image


def gray(value, h=32, w=32):
    return np.full((h, w, 3), value, dtype=np.uint8)


# ------------------------------------------------------------------------ blur


def test_blur_kernel1_byte_identity():
    rng = np.random.default_rng(0)
    img = random_image(rng)
    assert (gaussian_blur(img, 1) == img).all()


def test_blur_constant_image_unchanged():
    for k in (3, 5, 9, 19):
        assert (gaussian_blur(gray(137), k) == 137).all()


def test_blur_even_kernel_rejected():
    with pytest.raises(ValueError):
        gaussian_blur(gray(0), 4)


def test_blur_impulse_matches_kernel_outer_product():
    # independent oracle: evaluate the 5-tap weights from the formula directly
    k = 5
    sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8
    x = np.arange(-2, 3, dtype=np.float64)
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g = g / g.sum()

    img = np.zeros((11, 11, 1), dtype=np.uint8)
    img[5, 5, 0] = 255
    out = gaussian_blur(img, k)
    expected = np.floor(255.0 * np.outer(g, g) + 0.5)
    assert (out[3:8, 3:8, 0] == expected).all()
    assert out[0, 0, 0] == 0


# ------------------------------------------------------------------------ jpeg


def natural(h=64, w=64, seed=1):
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = 90 + 60 * np.sin(xx / 5.0) + 40 * np.cos(yy / 7.0) + rng.normal(0, 10, (h, w))
    return np.clip(img, 0, 255).astype(np.uint8)[:, :, None].repeat(3, axis=2)


def test_jpeg_size_increases_with_quality():
    img = natural()
    _, big = jpeg_roundtrip(img, 100)
    _, small = jpeg_roundtrip(img, 5)
    assert big > small


def test_jpeg_constant_gray_roundtrip_tolerance():
    out, _ = jpeg_roundtrip(gray(128), 10)
    assert np.abs(out.astype(int) - 128).max() <= 2


def test_jpeg_quality_sweep_sizes_nonincreasing():
    img = natural(seed=2)
    sizes = [jpeg_roundtrip(img, q)[1] for q in (30, 20, 10, 1)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_jpeg_preserves_shape_and_dtype():
    out, _ = jpeg_roundtrip(natural(), 50)
    assert out.shape == (64, 64, 3) and out.dtype == np.uint8
    out1, _ = jpeg_roundtrip(gray(40)[:, :, :1], 50)
    assert out1.shape == (32, 32, 1)


# ----------------------------------------------------------------------- noise


def test_noise_sigma_zero_identity():
    rng = np.random.default_rng(3)
    img = random_image(rng)
    assert (gaussian_noise(img, 0.0, seed=9) == img).all()


def test_noise_empirical_std():
    img = gray(128, 128, 128)  # 49k pixels, far from clipping
    out = gaussian_noise(img, 28.0, seed=4)
    delta = out.astype(float) - img.astype(float)
    assert abs(delta.std() - 28.0) <= 1.5


def test_noise_seeded_determinism():
    img = gray(100)
    a = gaussian_noise(img, 10.0, seed=5)
    b = gaussian_noise(img, 10.0, seed=5)
    c = gaussian_noise(img, 10.0, seed=6)
    assert (a == b).all()
    assert (a != c).any()


# ------------------------------------------------------------------------- d2p


def test_d2p_identity_parameterization_is_identity():
    rng = np.random.default_rng(6)
    img = random_image(rng)
    chain = DistortionConfig(kind="d2p_chain", chain=(
        DistortionConfig(kind="perspective", corner_jitter=0.0),
        DistortionConfig(kind="photometric", photometric_jitter=0.0),
        DistortionConfig(kind="blur", blur_kernel=1),
        DistortionConfig(kind="noise", noise_sigma=0.0),
    ))
    result = d2p_chain(img, chain)
    assert (result.image == img).all()
    assert np.allclose(result.homography, np.eye(3))


def test_d2p_default_chain_deterministic():
    rng = np.random.default_rng(7)
    img = random_image(rng, 48, 48)
    cfg = default_d2p_chain(seed=11)
    a = d2p_chain(img, cfg)
    b = d2p_chain(img, cfg)
    assert (a.image == b.image).all()
    assert (a.homography == b.homography).all()
    assert len(a.jpeg_sizes) == 1


def test_d2p_homography_moves_patch_corners():
    # warp-only chain on a patched image: the recorded homography maps the
    # bright patch onto its new location
    img = np.full((64, 64, 3), 30, dtype=np.uint8)
    img[20:30, 40:50] = 250
    warped, h_mat = perspective_warp(img, corner_jitter=0.02, seed=3)
    pts = np.array([[44.5, 24.5]])  # patch center (x, y)
    mapped = apply_homography_points(h_mat, pts)[0]
    mx, my = int(round(mapped[0])), int(round(mapped[1]))
    assert warped[my, mx, 0] > 200  # still bright at the mapped location
    assert not np.array_equal(warped, img)


def test_photometric_zero_jitter_identity():
    rng = np.random.default_rng(8)
    img = random_image(rng)
    assert (photometric_jitter(img, 0.0, seed=1) == img).all()


def test_apply_distortion_dispatch():
    rng = np.random.default_rng(9)
    img = random_image(rng)
    assert (apply_distortion(img, DistortionConfig(kind="blur", blur_kernel=1)) == img).all()
    assert (apply_distortion(img, DistortionConfig(kind="noise", noise_sigma=0.0)) == img).all()
    out = apply_distortion(img, DistortionConfig(kind="jpeg", jpeg_quality=90))
    assert out.shape == img.shape


def test_distortion_config_validation():
    with pytest.raises(ValueError):
        DistortionConfig(kind="blur", blur_kernel=4)
    with pytest.raises(ValueError):
        DistortionConfig(kind="jpeg", jpeg_quality=0)
    with pytest.raises(ValueError):
        DistortionConfig(kind="noise", noise_sigma=-1)
    with pytest.raises(ValueError):
        DistortionConfig(kind="d2p_chain")
    with pytest.raises(ValueError):
        DistortionConfig(kind="sharpen")


def test_distortions_preserve_shape_dtype():
    rng = np.random.default_rng(10)
    img = random_image(rng, 40, 24)
    for cfg in (DistortionConfig(kind="blur", blur_kernel=7),
                DistortionConfig(kind="jpeg", jpeg_quality=15),
                DistortionConfig(kind="noise", noise_sigma=12.0, seed=2),
                default_d2p_chain(seed=1)):
        out = apply_distortion(img, cfg)
        assert out.shape == img.shape and out.dtype == np.uint8
