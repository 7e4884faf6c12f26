"""Canonical image representation and shared numeric primitives.

Images are numpy arrays of shape (H, W, C) with C in {1, 3}, float values
in [0, 1], channel-last. Every module converts to/from other ranges or
layouts at its own boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

MIN_SIDE = 8  # smallest H/W we accept: JPEG blocks and 7x7 patches need room

# ITU-R BT.601 luma weights
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LabeledImage:
    """An image with its class index and a stable identifier."""

    image: np.ndarray
    label: int
    source_id: str


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the (H, W, C) / [0,1] contract; returns the array unchanged."""
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise DimensionError(f"expected (H, W, C) array, got shape {arr.shape}")
    h, w, c = arr.shape
    if c not in (1, 3):
        raise DimensionError(f"channels must be 1 or 3, got {c}")
    if h < MIN_SIDE or w < MIN_SIDE:
        raise DimensionError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise DimensionError(f"expected float dtype, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise DimensionError("image contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise DimensionError(f"values must lie in [0, 1], got [{lo}, {hi}]")
    return arr


def to_bytes_scale(img: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to uint8 with round-half-up (0.5 -> 128 via 127.5)."""
    arr = validate_image(img)
    # np.round is round-half-even; the byte convention here is half-up
    return np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def from_bytes_scale(data: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_bytes_scale`; recovers values within 1/510."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B. Identity for 1-channel."""
    arr = validate_image(img)
    if arr.shape[2] == 1:
        return arr
    return (arr @ _LUMA_WEIGHTS)[:, :, None]


def extract_patches(img: np.ndarray, patch: int, stride: int = 1) -> np.ndarray:
    """Flattened sliding-window patches of a single-channel image.

    Row-major order; returns shape (count, patch**2) with
    count = (floor((H-patch)/stride)+1) * (floor((W-patch)/stride)+1).
    """
    arr = np.asarray(img)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise DimensionError("extract_patches expects a single-channel image")
        arr = arr[:, :, 0]
    h, w = arr.shape
    if patch > h or patch > w:
        raise DimensionError(f"patch {patch} exceeds image size {h}x{w}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    windows = np.lib.stride_tricks.sliding_window_view(arr, (patch, patch))
    windows = windows[::stride, ::stride]
    n = windows.shape[0] * windows.shape[1]
    return windows.reshape(n, patch * patch).copy()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the [0,1] scale; inf when equal."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
