"""Dataset plumbing: PNG interchange, labeled folders, and the desk dataset.

Clean and adversarial sets are stored as PNG only; lossy formats would
pre-compress the very perturbations the defense is graded on. The desk
dataset is a generated 10-class 32x32 RGB set whose classes are low-frequency
shapes, so class identity survives JPEG compression, mirror flipping, and
early-stopped reconstruction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DatasetError
from .image_core import LabeledImage, from_bytes_scale, to_bytes_scale, validate_image

DESK_CLASSES = (
    "disc",
    "ring",
    "square",
    "frame",
    "diamond",
    "plus",
    "triangle",
    "hbars",
    "vbars",
    "cross",
)

_SUPERSAMPLE = 4  # shape masks are rendered at 4x and area-averaged down


def save_png(img: np.ndarray, path: str) -> None:
    arr = to_bytes_scale(img)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as pil:
        if pil.format != "PNG":
            raise DatasetError(f"{path}: not a PNG file (format={pil.format})")
        if pil.mode == "L":
            arr = np.asarray(pil)
        else:
            arr = np.asarray(pil.convert("RGB"))
    return from_bytes_scale(arr)


@dataclass
class FolderDataset:
    """Labeled images plus the class-name table and any ingest warnings."""

    images: list[LabeledImage]
    class_names: list[str]
    warnings: list[str] = field(default_factory=list)


def load_labeled_folder(folder: str) -> FolderDataset:
    """Load a folder of class subdirectories of PNGs.

    Labels are indices into the sorted subdirectory names. source_ids are
    path-based ("classdir/filename"), so duplicate filenames across classes
    stay distinct. Non-PNG files produce warnings and are skipped; an empty
    result is an error.
    """
    if not os.path.isdir(folder):
        raise DatasetError(f"not a directory: {folder}")
    class_names = sorted(
        d for d in os.listdir(folder) if os.path.isdir(os.path.join(folder, d))
    )
    images: list[LabeledImage] = []
    warnings: list[str] = []
    for label, cname in enumerate(class_names):
        cdir = os.path.join(folder, cname)
        for fname in sorted(os.listdir(cdir)):
            path = os.path.join(cdir, fname)
            if not os.path.isfile(path):
                continue
            if not fname.lower().endswith(".png"):
                warnings.append(f"skipped non-PNG file: {cname}/{fname}")
                continue
            try:
                arr = load_png(path)
            except (OSError, DatasetError) as exc:
                warnings.append(f"unreadable: {cname}/{fname}: {exc}")
                continue
            images.append(LabeledImage(arr, label, f"{cname}/{fname}"))
    if not images:
        raise DatasetError(f"no usable PNG images under {folder}")
    return FolderDataset(images, class_names, warnings)


def save_labeled_set(images, folder: str, class_names=None) -> None:
    """Write LabeledImages back out as class-subdirectory PNGs."""
    for li in images:
        cname = class_names[li.label] if class_names else f"class_{li.label}"
        cdir = os.path.join(folder, cname)
        os.makedirs(cdir, exist_ok=True)
        base = os.path.basename(li.source_id)
        if not base.lower().endswith(".png"):
            base += ".png"
        save_png(li.image, os.path.join(cdir, base))


# --- desk dataset generation -------------------------------------------------

def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased [0,1] mask at the target resolution."""
    up = size * _SUPERSAMPLE
    cy = (0.5 + rng.uniform(-0.12, 0.12)) * up
    cx = (0.5 + rng.uniform(-0.12, 0.12)) * up
    s = rng.uniform(0.22, 0.34) * up  # shape half-extent
    yy, xx = np.mgrid[0:up, 0:up] + 0.5
    dy, dx = yy - cy, xx - cx
    t = max(s * rng.uniform(0.15, 0.24), 1.5 * _SUPERSAMPLE)  # stroke width

    if shape == "disc":
        m = dx * dx + dy * dy <= s * s
    elif shape == "ring":
        d2 = dx * dx + dy * dy
        m = ((s - t) ** 2 <= d2) & (d2 <= s * s)
    elif shape == "square":
        m = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif shape == "frame":
        outer = (np.abs(dx) <= s) & (np.abs(dy) <= s)
        inner = (np.abs(dx) <= s - t) & (np.abs(dy) <= s - t)
        m = outer & ~inner
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= s * 1.2
    elif shape == "plus":
        m = ((np.abs(dx) <= t) & (np.abs(dy) <= s)) | (
            (np.abs(dy) <= t) & (np.abs(dx) <= s)
        )
    elif shape == "triangle":
        # isoceles, apex up: width grows linearly from apex to base
        frac = (dy + s) / (2.0 * s)
        m = (np.abs(dy) <= s) & (np.abs(dx) <= s * np.clip(frac, 0.0, 1.0))
    elif shape == "hbars":
        off = s * 0.55
        m = (np.abs(dx) <= s) & (
            (np.abs(dy - off) <= t) | (np.abs(dy + off) <= t)
        )
    elif shape == "vbars":
        off = s * 0.55
        m = (np.abs(dy) <= s) & (
            (np.abs(dx - off) <= t) | (np.abs(dx + off) <= t)
        )
    elif shape == "cross":
        box = (np.abs(dx) <= s) & (np.abs(dy) <= s)
        m = box & ((np.abs(dx - dy) <= t) | (np.abs(dx + dy) <= t))
    else:
        raise ValueError(f"unknown shape {shape!r}")

    m = m.astype(np.float64)
    return m.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))


def _smooth_background(size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((size, size, 3))
    lo = rng.uniform(0.15, 0.45)
    span = rng.uniform(0.12, 0.22)
    for c in range(3):
        base = gaussian_filter(rng.standard_normal((size, size)), sigma=4.0)
        base -= base.min()
        base /= max(base.max(), 1e-9)
        img[:, :, c] = lo + span * base
    return img


_LUMA = np.array([0.299, 0.587, 0.114])


DEFAULT_CONTRAST = (0.12, 0.30)


def render_desk_image(
    label: int, seed: int, size: int = 32, contrast: tuple[float, float] = DEFAULT_CONTRAST
) -> np.ndarray:
    """One desk image: a class shape over a smooth background.

    Foreground luminance contrast against the local background is kept in a
    narrow low band and the composite is slightly blurred: classes stay
    readable (shapes are large and low-frequency) while decision margins stay
    small enough for tiny-budget attacks to matter.
    """
    rng = np.random.default_rng(seed)
    bg = _smooth_background(size, rng)
    mask = _shape_mask(DESK_CLASSES[label], size, rng)
    region = mask > 0.5
    bg_luma = float((bg @ _LUMA)[region].mean()) if region.any() else 0.5
    fg = rng.uniform(0.05, 0.95, size=3)
    for _ in range(40):
        if contrast[0] <= abs(float(fg @ _LUMA) - bg_luma) <= contrast[1]:
            break
        fg = rng.uniform(0.05, 0.95, size=3)
    img = bg * (1.0 - mask[:, :, None]) + fg[None, None, :] * mask[:, :, None]
    img = gaussian_filter(img, sigma=(0.5, 0.5, 0.0))
    return np.clip(img, 0.0, 1.0)


def make_desk_dataset(
    out_dir: str,
    n_train: int = 4000,
    n_test: int = 1000,
    seed: int = 0,
    size: int = 32,
    contrast: tuple[float, float] = DEFAULT_CONTRAST,
    label_noise: float = 0.0,
) -> None:
    """Write train/ and test/ class-labeled PNG folders.

    label_noise files that fraction of training images under a uniformly
    chosen wrong class; pixels are unaffected (the image stream is drawn
    from a separate generator) and the test split is never corrupted.
    Perfectly separable synthetic shapes let small models grow decision
    margins far wider than photographic data ever allows; a noisy-label
    fraction restores realistic margin structure.
    """
    if not 0.0 <= label_noise < 1.0:
        raise DatasetError(f"label_noise must be in [0, 1), got {label_noise}")
    rng = np.random.default_rng(seed)
    label_rng = np.random.default_rng((seed, 1))
    n_classes = len(DESK_CLASSES)
    for split, n in (("train", n_train), ("test", n_test)):
        per_class = n // n_classes
        for label, cname in enumerate(DESK_CLASSES):
            os.makedirs(os.path.join(out_dir, split, f"{label}_{cname}"), exist_ok=True)
            for i in range(per_class):
                img_seed = int(rng.integers(0, 2**63 - 1))
                img = render_desk_image(label, img_seed, size, contrast)
                validate_image(img)
                filed = label
                if split == "train" and label_noise > 0.0 and label_rng.random() < label_noise:
                    filed = (label + int(label_rng.integers(1, n_classes))) % n_classes
                cdir = os.path.join(out_dir, split, f"{filed}_{DESK_CLASSES[filed]}")
                os.makedirs(cdir, exist_ok=True)
                save_png(img, os.path.join(cdir, f"{cname}_{i:05d}.png"))
