import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonlab.images import checkerboard
from poisonlab.triggers import (
    BadNetsParams,
    BlendedParams,
    BppParams,
    SigParams,
    TrojanStampParams,
    WaNetParams,
    apply_badnets,
    apply_blended,
    apply_bpp,
    apply_sig,
    apply_trojan_stamp,
    apply_wanet,
    badnets_patch_origin,
    sig_offsets,
)

from conftest import random_image


def gray(value, h=32, w=32):
    return np.full((h, w, 3), value, dtype=np.uint8)


# --------------------------------------------------------------------- badnets


def test_badnets_default_geometry_224():
    # size 30 at offsets 44/66 on 224x224: columns [150,180), rows [128,158)
    top, left = badnets_patch_origin(224, 224, BadNetsParams())
    assert (top, left) == (128, 150)

    rng = np.random.default_rng(0)
    img = random_image(rng, 224, 224)
    out = apply_badnets(img, BadNetsParams())
    board = checkerboard(30, 30)
    patch = out[128:158, 150:180]
    assert all((patch[:, :, c] == board).all() for c in range(3))
    mask = np.ones((224, 224), dtype=bool)
    mask[128:158, 150:180] = False
    assert (out[mask] == img[mask]).all()


def test_badnets_patch_checksum_matches_standalone_board():
    rng = np.random.default_rng(1)
    img = random_image(rng, 224, 224)
    out = apply_badnets(img, BadNetsParams())
    board = checkerboard(30, 30)
    assert out[128:158, 150:180, 0].sum() == board.sum()


def test_badnets_zero_patch_is_identity():
    rng = np.random.default_rng(2)
    img = random_image(rng, 64, 64)
    out = apply_badnets(img, BadNetsParams(patch_size=0, offset_right=4, offset_bottom=4))
    assert (out == img).all()


def test_badnets_out_of_bounds_rejected():
    img = gray(10, 32, 32)
    with pytest.raises(ValueError):
        apply_badnets(img, BadNetsParams())  # 30px patch cannot fit a 32px image


def test_badnets_proportional_scaling():
    p = BadNetsParams().scaled(32)
    assert (p.patch_size, p.offset_right, p.offset_bottom) == (4, 6, 9)
    rng = np.random.default_rng(3)
    out = apply_badnets(random_image(rng), p)
    assert out.shape == (32, 32, 3)


# --------------------------------------------------------------------- blended


def test_blended_alpha_endpoints():
    rng = np.random.default_rng(4)
    img = random_image(rng)
    key = random_image(rng)
    assert (apply_blended(img, BlendedParams(key_image=key, alpha=0.0)) == img).all()
    assert (apply_blended(img, BlendedParams(key_image=key, alpha=1.0)) == key).all()


def test_blended_formula_value():
    out = apply_blended(gray(100), BlendedParams(key_image=gray(200), alpha=0.1))
    assert (out == 110).all()


def test_blended_resizes_key():
    rng = np.random.default_rng(5)
    out = apply_blended(random_image(rng, 32, 32), BlendedParams(key_image=random_image(rng, 8, 8), alpha=0.5))
    assert out.shape == (32, 32, 3)


# ------------------------------------------------------------------------- sig


def test_sig_closed_form_all_columns():
    # m=224, f=6, delta=40: generated offsets match the formula within 0.5
    params = SigParams(delta=40, freq=6)
    img = gray(100, 224, 224)
    out = apply_sig(img, params)
    for j in range(224):
        expected = 40 * math.sin(2 * math.pi * j * 6 / 224)
        got = float(out[0, j, 0]) - 100.0
        assert abs(got - expected) <= 0.5, f"column {j}: {got} vs {expected}"


def test_sig_row_invariance_exact():
    params = SigParams(delta=40, freq=6)
    out = apply_sig(gray(100, 224, 224), params)
    assert (out == out[0:1, :, :]).all()


def test_sig_column_zero_unchanged():
    out = apply_sig(gray(77, 32, 32), SigParams())
    assert (out[:, 0] == 77).all()


def test_sig_specific_column_oracle():
    # j=9, m=224, f=6: offset = 40 sin(2 pi 54/224), evaluated numerically
    out = apply_sig(gray(100, 8, 224), SigParams(delta=40, freq=6))
    expected = 100 + 40 * math.sin(2 * math.pi * 9 * 6 / 224)
    assert abs(float(out[0, 9, 0]) - expected) <= 0.5


def test_sig_zero_delta_identity():
    rng = np.random.default_rng(6)
    img = random_image(rng)
    assert (apply_sig(img, SigParams(delta=0)) == img).all()


# ------------------------------------------------------------------------- bpp


def test_bpp_depth8_identity():
    rng = np.random.default_rng(7)
    img = random_image(rng)
    assert (apply_bpp(img, BppParams(bit_depth=8)) == img).all()


def test_bpp_endpoints_fixed_at_depth1():
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    img[0] = 255
    out = apply_bpp(img, BppParams(bit_depth=1))
    assert (out[0] == 255).all() and (out[1:] == 0).all()


def test_bpp_formula_value():
    out = apply_bpp(gray(100), BppParams(bit_depth=3))
    assert (out == 109).all()  # round(100/255*7)=3 -> round(3*255/7)=109


# ----------------------------------------------------------------------- wanet


def test_wanet_zero_strength_near_identity():
    rng = np.random.default_rng(8)
    img = random_image(rng)
    out = apply_wanet(img, WaNetParams(strength=0.0, seed=3))
    assert np.abs(out.astype(int) - img.astype(int)).max() <= 1


def test_wanet_seeded_determinism():
    rng = np.random.default_rng(9)
    img = random_image(rng)
    a = apply_wanet(img, WaNetParams(seed=5))
    b = apply_wanet(img, WaNetParams(seed=5))
    assert (a == b).all()


def test_wanet_changes_image():
    rng = np.random.default_rng(10)
    img = random_image(rng)
    out = apply_wanet(img, WaNetParams(strength=0.5, seed=1))
    assert out.shape == img.shape
    assert (out != img).any()


# ---------------------------------------------------------------------- trojan


def test_trojan_mask_endpoints():
    rng = np.random.default_rng(11)
    img = random_image(rng)
    trig = random_image(rng)
    zero = np.zeros(img.shape[:2])
    one = np.ones(img.shape[:2])
    assert (apply_trojan_stamp(img, TrojanStampParams(trigger_image=trig, mask=zero)) == img).all()
    assert (apply_trojan_stamp(img, TrojanStampParams(trigger_image=trig, mask=one)) == trig).all()


def test_trojan_half_mask_rounds_half_up():
    img = gray(0)
    trig = gray(255)
    mask = np.full(img.shape[:2], 0.5)
    out = apply_trojan_stamp(img, TrojanStampParams(trigger_image=trig, mask=mask))
    assert (out == 128).all()  # round(127.5) half-up


def test_trojan_bad_mask_rejected():
    img = gray(0)
    with pytest.raises(ValueError):
        apply_trojan_stamp(img, TrojanStampParams(trigger_image=gray(1), mask=np.full((8, 8), 0.5)))


# ------------------------------------------------------------------ properties


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(16, 48), w=st.integers(16, 48))
def test_transforms_preserve_shape_and_dtype(seed, h, w):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    outs = [
        apply_sig(img, SigParams(delta=20, freq=4)),
        apply_bpp(img, BppParams(bit_depth=3)),
        apply_blended(img, BlendedParams(key_image=img[::-1].copy(), alpha=0.3)),
        apply_wanet(img, WaNetParams(seed=seed % 1000)),
    ]
    for out in outs:
        assert out.shape == img.shape and out.dtype == np.uint8


@settings(max_examples=20, deadline=None)
@given(value=st.integers(30, 220), delta=st.floats(0, 30), freq=st.integers(1, 8))
def test_sig_row_invariance_property(value, delta, freq):
    out = apply_sig(gray(value, 16, 24), SigParams(delta=delta, freq=freq))
    assert (out == out[0:1, :, :]).all()


def test_transforms_accept_grayscale():
    rng = np.random.default_rng(13)
    img = rng.integers(0, 256, size=(224, 224, 1), dtype=np.uint8)
    assert apply_badnets(img, BadNetsParams()).shape == img.shape
    assert apply_sig(img, SigParams()).shape == img.shape
    assert apply_bpp(img, BppParams()).shape == img.shape
    assert apply_wanet(img, WaNetParams(seed=1)).shape == img.shape
