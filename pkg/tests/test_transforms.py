import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from mvfusion.transforms import (
    center_crop_resize,
    hflip_mv,
    multiscale_crop,
    normalize_mv,
    resize_bilinear,
)


def _formula(x):
    # y = clamp(x * 127.5 / 20 + 128, 0, 255) / 255 - 0.5, evaluated step by step
    shifted = np.asarray(x, np.float64) * 127.5 / 20 + 128
    return np.minimum(np.maximum(shifted, 0), 255) / 255 - 0.5


def test_normalize_hand_values():
    assert normalize_mv(20.0) == np.float32(0.5)  # 255.5 clamps to 255
    assert normalize_mv(-1000.0) == np.float32(-0.5)
    assert normalize_mv(1000.0) == np.float32(0.5)
    assert_allclose(normalize_mv(0.0), 128 / 255 - 0.5, rtol=0, atol=1e-7)
    assert abs(normalize_mv(0.0)) <= 1 / 255


def test_normalize_minus_twenty_sits_one_half_step_above_the_floor():
    # -20 * 6.375 + 128 = 0.5, which is inside the clamp range
    y = float(normalize_mv(-20.0))
    assert_allclose(y, 0.5 / 255 - 0.5, rtol=0, atol=1e-7)
    assert abs(y - (-0.5)) <= 1 / 255
    # the floor is reached once x * 6.375 + 128 <= 0
    assert normalize_mv(-128 / 6.375) == np.float32(-0.5)


def test_normalize_matches_formula_on_random_values(rng):
    x = rng.uniform(-60, 60, 100_000)
    y = normalize_mv(x)
    assert y.dtype == np.float32
    assert_allclose(y, _formula(x), rtol=0, atol=1e-7)
    assert y.min() >= -0.5 and y.max() <= 0.5
    order = np.argsort(x)
    assert np.all(np.diff(y[order]) >= 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e6, 1e6, allow_nan=False))
def test_normalize_is_bounded_and_monotone(a, b):
    ya, yb = normalize_mv(a), normalize_mv(b)
    assert -0.5 <= ya <= 0.5
    if a <= b:
        assert ya <= yb


def test_normalize_keeps_shape():
    f = np.zeros((5, 7, 2), np.int16)
    assert normalize_mv(f).shape == (5, 7, 2)


def test_hflip_is_an_involution_on_random_frames(rng):
    for _ in range(1000):
        h, w = rng.integers(1, 9, 2)
        f = rng.integers(-32768, 32768, (h, w, 2)).astype(np.int16)
        assert_array_equal(hflip_mv(hflip_mv(f)), f)
        flipped = hflip_mv(f)
        assert_array_equal(flipped[..., 0], -f[:, ::-1, 0].astype(np.int32))
        assert_array_equal(flipped[..., 1], f[:, ::-1, 1])


def test_hflip_uniform_rightward_motion():
    f = np.zeros((3, 4, 2), np.int16)
    f[..., 0] = 5
    f[..., 1] = 2
    out = hflip_mv(f)
    assert np.all(out[..., 0] == -5)
    assert np.all(out[..., 1] == 2)


def test_hflip_single_pixel_moves_to_mirrored_column():
    f = np.zeros((2, 6, 2), np.int16)
    f[1, 1] = (3, -4)
    out = hflip_mv(f)
    assert tuple(out[1, 6 - 1 - 1]) == (-3, -4)
    assert np.count_nonzero(out) == 2


def test_hflip_then_normalize_matches_direct_mapping(rng):
    for _ in range(200):
        f = rng.integers(-20, 21, (6, 5, 2))
        direct = np.empty(f.shape)
        direct[..., 0] = _formula(-f[:, ::-1, 0])
        direct[..., 1] = _formula(f[:, ::-1, 1])
        assert_allclose(normalize_mv(hflip_mv(f)), direct, rtol=0, atol=1e-7)
        # where neither side clamps (|x| < 19.92) the map is symmetric about 1/(2*255);
        # at x = 20 the upper clamp eats half a step
        inner = np.abs(f[:, ::-1, 0]) <= 19
        total = normalize_mv(hflip_mv(f))[..., 0] + normalize_mv(f)[:, ::-1, 0]
        assert_allclose(total[inner], 1 / 255, rtol=0, atol=1e-6)


def _torch_bilinear(frame, out_h, out_w):
    x = torch.from_numpy(np.asarray(frame, np.float32).transpose(2, 0, 1).copy())[None]
    y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False, antialias=False)
    return y[0].numpy().transpose(1, 2, 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(2)),
              elements=st.floats(-30, 30, width=32)),
       st.integers(1, 16), st.integers(1, 16))
def test_resize_matches_torch_bilinear(frame, out_h, out_w):
    assert_allclose(resize_bilinear(frame, out_h, out_w), _torch_bilinear(frame, out_h, out_w),
                    rtol=1e-5, atol=1e-4)


def test_multiscale_crop_identity_on_full_square(rng):
    f = rng.normal(size=(8, 8, 2)).astype(np.float32)
    out = multiscale_crop(f, 8, np.random.default_rng(0), scales=(1.0,))
    assert_array_equal(out, f)


def test_multiscale_crop_constant_field(rng):
    f = np.full((17, 23, 2), 7.0, np.float32)
    for seed in range(20):
        out = multiscale_crop(f, 11, np.random.default_rng(seed))
        assert out.shape == (11, 11, 2)
        assert_allclose(out, 7.0, rtol=0, atol=1e-5)


def test_multiscale_crop_deterministic_given_rng(rng):
    f = rng.normal(size=(20, 30, 2))
    a = multiscale_crop(f, 9, np.random.default_rng(42))
    b = multiscale_crop(f, 9, np.random.default_rng(42))
    assert_array_equal(a, b)


def test_multiscale_crop_side_and_positions():
    # a frame whose value is its (row, col) lets us read back the crop window
    h, w = 20, 24
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = np.stack([rows, cols], axis=-1).astype(np.float32)
    seen_sides, seen_origins = set(), set()
    for seed in range(300):
        for s in (1.0, 0.875, 0.75, 0.66):
            side = int(np.floor(20 * s + 0.5))
            out = multiscale_crop(f, side, np.random.default_rng(seed), scales=(s,))
            origin = (int(out[0, 0, 0]), int(out[0, 0, 1]))
            seen_sides.add(side)
            seen_origins.add((side, origin))
            # when out_size equals the side no interpolation happens
            assert out[-1, -1, 0] - out[0, 0, 0] == side - 1
    assert seen_sides == {20, 18, 15, 13}
    for side in seen_sides:
        expected = {(0, 0), (0, w - side), (h - side, 0), (h - side, w - side),
                    ((h - side) // 2, (w - side) // 2)}
        assert {o for s, o in seen_origins if s == side} == expected


def test_center_crop_resize_cases(rng):
    sq = rng.normal(size=(6, 6, 2)).astype(np.float32)
    assert_array_equal(center_crop_resize(sq, 6), sq)
    const = np.full((8, 4, 2), -3.0)
    out = center_crop_resize(const, 4)
    assert out.shape == (4, 4, 2)
    assert_allclose(out, -3.0)


def test_center_crop_depends_only_on_central_square(rng):
    f = rng.normal(size=(10, 16, 2)).astype(np.float32)
    expected = _torch_bilinear(f[:, 3:13], 7, 7)
    assert_allclose(center_crop_resize(f, 7), expected, rtol=1e-5, atol=1e-5)
    g = f.copy()
    g[:, :3] = 1e3
    g[:, 13:] = -1e3
    assert_array_equal(center_crop_resize(g, 7), center_crop_resize(f, 7))


def test_bad_frame_shapes():
    with pytest.raises(ValueError):
        hflip_mv(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        center_crop_resize(np.zeros((4, 4, 2)), 0)
