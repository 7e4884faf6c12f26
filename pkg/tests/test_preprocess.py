"""Unit tests for the JPEG + mirror-flip small-perturbation path."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faddefend.image_core import psnr
from faddefend.preprocess import (
    PreprocessConfig,
    codec_identity,
    jpeg_encode,
    jpeg_roundtrip,
    mirror_flip,
    small_path_defend,
)


def _photo(seed=0, size=64, channels=3, blur=3.0):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    img = np.empty((size, size, channels))
    for c in range(channels):
        base = gaussian_filter(rng.standard_normal((size, size)), sigma=blur)
        base -= base.min()
        base /= max(base.max(), 1e-9)
        img[:, :, c] = 0.15 + 0.7 * base
    return img


class TestMirrorFlip:
    def test_involution(self):
        img = _photo(1)
        assert np.array_equal(mirror_flip(mirror_flip(img)), img)

    def test_reverses_columns(self):
        img = _photo(2)
        assert np.array_equal(mirror_flip(img), img[:, ::-1, :])

    @settings(max_examples=25)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_preserves_row_multisets(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((8, 8, 3))
        flipped = mirror_flip(img)
        assert np.array_equal(np.sort(img, axis=1), np.sort(flipped, axis=1))


class TestJpegRoundtrip:
    def test_shape_and_range(self):
        img = _photo(3)
        out = jpeg_roundtrip(img, 95)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_high_quality_is_faithful(self):
        # measured ~40 dB at QF 95 on smooth photos; 35 leaves slack
        img = _photo(4)
        assert psnr(img, jpeg_roundtrip(img, 95)) > 35.0

    def test_quality_monotone(self):
        # fidelity is non-decreasing in QF; codec rounding may produce at
        # most one small (<= 0.2 dB) violation
        img = _photo(5)
        vals = [psnr(img, jpeg_roundtrip(img, qf)) for qf in (10, 30, 50, 70, 90, 95)]
        drops = [a - b for a, b in zip(vals, vals[1:]) if b < a]
        assert len(drops) <= 1
        assert all(d <= 0.2 for d in drops)

    def test_grayscale_supported(self):
        img = _photo(6, channels=1)
        out = jpeg_roundtrip(img, 95)
        assert out.shape == img.shape

    def test_encode_produces_jfif(self):
        data = jpeg_encode(_photo(7), 95)
        assert data[:2] == b"\xff\xd8"  # SOI marker

    def test_deterministic(self):
        img = _photo(8)
        assert jpeg_encode(img, 75) == jpeg_encode(img, 75)


class TestSmallPathDefend:
    def test_is_jpeg_then_flip(self):
        img = _photo(9)
        cfg = PreprocessConfig(quality_factor=95, apply_flip=True)
        expected = mirror_flip(jpeg_roundtrip(img, 95, cfg.chroma_subsampling))
        assert np.array_equal(small_path_defend(img, cfg), expected)

    def test_flip_disabled(self):
        img = _photo(10)
        cfg = PreprocessConfig(quality_factor=80, apply_flip=False)
        expected = jpeg_roundtrip(img, 80, cfg.chroma_subsampling)
        assert np.array_equal(small_path_defend(img, cfg), expected)

    def test_default_quality_is_95(self):
        assert PreprocessConfig().quality_factor == 95


class TestPreprocessConfig:
    def test_rejects_bad_quality(self):
        with pytest.raises(ValueError):
            PreprocessConfig(quality_factor=0)
        with pytest.raises(ValueError):
            PreprocessConfig(quality_factor=101)

    def test_rejects_unknown_subsampling(self):
        with pytest.raises(ValueError):
            PreprocessConfig(chroma_subsampling="4:1:1")


def test_codec_identity_names_pillow():
    ident = codec_identity()
    assert ident.startswith("Pillow ")
    assert "libjpeg" in ident
