"""Small-perturbation defense path: JPEG round-trip plus horizontal flip.

Baseline JFIF encoding removes high-frequency content (where adversarial
perturbations mostly live); the mirror flip then breaks any spatially
aligned adversarial structure that survived quantization.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, features

from .errors import EncodingError
from .image_core import from_bytes_scale, to_bytes_scale, validate_image

# Pillow subsampling codes for baseline JPEG
_SUBSAMPLING = {"4:4:4": 0, "4:2:2": 1, "4:2:0": 2}


@dataclass(frozen=True)
class PreprocessConfig:
    quality_factor: int = 95
    apply_flip: bool = True
    chroma_subsampling: str = "4:2:0"

    def __post_init__(self):
        if not 1 <= self.quality_factor <= 100:
            raise ValueError(f"quality_factor must be in [1, 100], got {self.quality_factor}")
        if self.chroma_subsampling not in _SUBSAMPLING:
            raise ValueError(f"unknown chroma subsampling {self.chroma_subsampling!r}")


def codec_identity() -> str:
    """Identity string of the pinned JPEG codec, for report fingerprints."""
    import PIL

    return f"Pillow {PIL.__version__} (libjpeg {features.version_codec('jpg')})"


def jpeg_encode(img: np.ndarray, qf: int, subsampling: str = "4:2:0") -> bytes:
    """Encode to baseline JFIF bytes at the given quality factor."""
    arr = to_bytes_scale(img)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    try:
        pil.save(buf, format="JPEG", quality=int(qf), subsampling=_SUBSAMPLING[subsampling])
    except (OSError, ValueError) as exc:
        raise EncodingError(f"JPEG encode failed (qf={qf}): {exc}") from exc
    return buf.getvalue()


def jpeg_roundtrip(img: np.ndarray, qf: int, subsampling: str = "4:2:0") -> np.ndarray:
    """Encode then decode; same shape, values back in [0, 1]."""
    arr = validate_image(img)
    data = jpeg_encode(arr, qf, subsampling)
    try:
        decoded = Image.open(io.BytesIO(data))
        decoded.load()
    except OSError as exc:
        raise EncodingError(f"JPEG decode failed (qf={qf}): {exc}") from exc
    out = from_bytes_scale(np.asarray(decoded))
    if out.shape != arr.shape:
        raise EncodingError(f"codec changed shape {arr.shape} -> {out.shape}")
    return out


def mirror_flip(img: np.ndarray) -> np.ndarray:
    """Left-right reflection; exact involution."""
    arr = validate_image(img)
    return arr[:, ::-1, :].copy()


def small_path_defend(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """JPEG round-trip, then (optionally) mirror flip, in that order."""
    out = jpeg_roundtrip(img, cfg.quality_factor, cfg.chroma_subsampling)
    if cfg.apply_flip:
        out = mirror_flip(out)
    return out
