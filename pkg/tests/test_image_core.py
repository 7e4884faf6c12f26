"""Unit tests for the shared image representation and numeric primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faddefend.errors import DimensionError
from faddefend.image_core import (
    LabeledImage,
    extract_patches,
    from_bytes_scale,
    luminance,
    psnr,
    to_bytes_scale,
    validate_image,
)


def _img(h=8, w=8, c=3, fill=0.5):
    return np.full((h, w, c), fill, dtype=np.float64)


class TestValidateImage:
    def test_accepts_valid_rgb(self):
        arr = _img()
        assert validate_image(arr) is arr

    def test_rejects_nan_and_inf(self):
        bad = _img()
        bad[0, 0, 0] = np.nan
        with pytest.raises(DimensionError):
            validate_image(bad)
        bad[0, 0, 0] = np.inf
        with pytest.raises(DimensionError):
            validate_image(bad)

    def test_accepts_single_channel(self):
        validate_image(_img(c=1))

    def test_rejects_2d(self):
        with pytest.raises(DimensionError):
            validate_image(np.zeros((8, 8)))

    def test_rejects_two_channels(self):
        with pytest.raises(DimensionError):
            validate_image(_img(c=2))

    def test_rejects_small(self):
        with pytest.raises(DimensionError):
            validate_image(_img(h=7))
        with pytest.raises(DimensionError):
            validate_image(_img(w=7))

    def test_rejects_integer_dtype(self):
        with pytest.raises(DimensionError):
            validate_image(np.zeros((8, 8, 3), dtype=np.uint8))

    def test_rejects_out_of_range(self):
        with pytest.raises(DimensionError):
            validate_image(_img(fill=1.5))
        bad = _img()
        bad[0, 0, 0] = -0.01
        with pytest.raises(DimensionError):
            validate_image(bad)


class TestByteScale:
    def test_half_rounds_up(self):
        # 0.5 * 255 + 0.5 = 128.0 exactly; half-up convention gives 128
        out = to_bytes_scale(_img(fill=0.5))
        assert out.dtype == np.uint8
        assert np.all(out == 128)

    def test_endpoints(self):
        assert np.all(to_bytes_scale(_img(fill=0.0)) == 0)
        assert np.all(to_bytes_scale(_img(fill=1.0)) == 255)

    def test_from_bytes_adds_channel_axis(self):
        out = from_bytes_scale(np.zeros((8, 8), dtype=np.uint8))
        assert out.shape == (8, 8, 1)

    @given(st.integers(min_value=0, max_value=255))
    def test_bytes_roundtrip_exact_on_grid(self, v):
        arr = np.full((8, 8, 1), v / 255.0)
        assert np.all(to_bytes_scale(arr) == v)

    @settings(max_examples=50)
    @given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
    def test_roundtrip_error_bounded(self, v):
        arr = np.full((8, 8, 1), v)
        back = from_bytes_scale(to_bytes_scale(arr))
        assert np.all(np.abs(back - arr) <= 0.5 / 255.0 + 1e-12)


class TestLuminance:
    def test_pure_channels(self):
        for ch, weight in enumerate((0.299, 0.587, 0.114)):
            arr = np.zeros((8, 8, 3))
            arr[:, :, ch] = 1.0
            y = luminance(arr)
            assert y.shape == (8, 8, 1)
            assert np.allclose(y, weight)

    def test_white_is_one(self):
        assert np.allclose(luminance(_img(fill=1.0)), 1.0)

    def test_single_channel_identity(self):
        arr = _img(c=1, fill=0.3)
        assert luminance(arr) is arr


class TestExtractPatches:
    def test_count_8x8_patch7(self):
        # (8-7+1)^2 = 4
        out = extract_patches(np.zeros((8, 8)), 7, 1)
        assert out.shape == (4, 49)

    def test_count_16x16_patch7_stride3(self):
        # (floor(9/3)+1)^2 = 16
        out = extract_patches(np.zeros((16, 16)), 7, 3)
        assert out.shape == (16, 49)

    def test_row_major_content(self):
        arr = np.arange(64, dtype=np.float64).reshape(8, 8)
        out = extract_patches(arr, 3, 2)
        assert np.array_equal(out[0], arr[0:3, 0:3].ravel())
        assert np.array_equal(out[1], arr[0:3, 2:5].ravel())
        # first patch of second window row
        n_cols = (8 - 3) // 2 + 1
        assert np.array_equal(out[n_cols], arr[2:5, 0:3].ravel())

    def test_accepts_hwc1(self):
        out = extract_patches(np.zeros((8, 8, 1)), 7)
        assert out.shape == (4, 49)

    def test_rejects_multichannel(self):
        with pytest.raises(DimensionError):
            extract_patches(np.zeros((8, 8, 3)), 3)

    def test_rejects_oversized_patch(self):
        with pytest.raises(DimensionError):
            extract_patches(np.zeros((8, 8)), 9)

    def test_rejects_bad_stride(self):
        with pytest.raises(DimensionError):
            extract_patches(np.zeros((8, 8)), 3, 0)

    @settings(max_examples=200)
    @given(
        h=st.integers(min_value=8, max_value=40),
        w=st.integers(min_value=8, max_value=40),
        patch=st.integers(min_value=3, max_value=8),
        stride=st.integers(min_value=1, max_value=5),
    )
    def test_count_formula(self, h, w, patch, stride):
        out = extract_patches(np.zeros((h, w)), patch, stride)
        expected = ((h - patch) // stride + 1) * ((w - patch) // stride + 1)
        assert out.shape == (expected, patch * patch)


class TestPsnr:
    def test_hand_value(self):
        # mse = 0.25 -> 10*log10(1/0.25) = 10*log10(4)
        a = np.zeros((8, 8, 1))
        b = np.full((8, 8, 1), 0.5)
        assert psnr(a, b) == pytest.approx(10.0 * np.log10(4.0))

    def test_equal_is_inf(self):
        a = _img()
        assert psnr(a, a) == float("inf")

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a = rng.random((8, 8, 3))
        b = rng.random((8, 8, 3))
        assert psnr(a, b) == pytest.approx(psnr(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.zeros((8, 8, 1)), np.zeros((8, 8, 3)))


def test_labeled_image_is_frozen():
    li = LabeledImage(_img(), 3, "img-003")
    with pytest.raises(AttributeError):
        li.label = 4
