"""Desk-scale differentiable classifiers.

Two deliberately different small convnets stand in for the large
surrogate/target pair used in cross-model experiments: attack code only
needs predictions and input gradients, so any differentiable classifier
can be plugged in behind the same handle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import load_labeled_folder
from .errors import DimensionError, TrainingError
from .image_core import LabeledImage


@dataclass(frozen=True)
class TrainReport:
    epochs: int
    final_test_accuracy: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.final_test_accuracy <= 1.0:
            raise ValueError(f"accuracy out of range: {self.final_test_accuracy}")


@dataclass
class ClassifierHandle:
    """A trained model plus the metadata the harness and manifests record."""

    identity: str
    arch: str
    num_classes: int
    input_shape: tuple[int, int, int]  # (H, W, C)
    module: nn.Module


def _small_conv_a(num_classes: int, in_channels: int) -> nn.Module:
    """5x5 convs + max-pool + fully-connected stack, no normalization."""
    return nn.Sequential(
        nn.Conv2d(in_channels, 32, 5, padding=2),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(32, 64, 5, padding=2),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.LazyLinear(384),
        nn.ReLU(),
        nn.Linear(384, 192),
        nn.ReLU(),
        nn.Linear(192, num_classes),
    )


class _VggBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.b1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.b2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = F.relu(self.b1(self.c1(x)))
        x = F.relu(self.b2(self.c2(x)))
        return F.max_pool2d(x, 2)


class _SmallConvB(nn.Module):
    """3x3 double-conv blocks with batch norm, global average pool head."""

    def __init__(self, num_classes, in_channels):
        super().__init__()
        self.block1 = _VggBlock(in_channels, 32)
        self.block2 = _VggBlock(32, 64)
        self.block3 = _VggBlock(64, 128)
        self.head = nn.Linear(128, num_classes)

    def forward(self, x):
        x = self.block3(self.block2(self.block1(x)))
        x = x.mean(dim=(2, 3))
        return self.head(x)


ARCHITECTURES = {
    "small_conv_A": _small_conv_a,
    "small_conv_B": _SmallConvB,
}


def _build(arch: str, num_classes: int, in_channels: int) -> nn.Module:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    module = ARCHITECTURES[arch](num_classes, in_channels)
    if arch == "small_conv_A":
        # materialize the lazy linear layer so state_dicts are complete
        module(torch.zeros(1, in_channels, 32, 32))
    return module


def _to_nchw(batch: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).to(dtype)


def _check_shapes(handle: ClassifierHandle, batch: np.ndarray):
    if batch.ndim != 4 or batch.shape[1:] != handle.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} does not match model input {handle.input_shape}"
        )


def predict(handle: ClassifierHandle, batch) -> np.ndarray:
    """Class probabilities, one simplex row per image."""
    arr = np.stack([np.asarray(b, dtype=np.float64) for b in batch])
    _check_shapes(handle, arr)
    dtype = next(handle.module.parameters()).dtype
    handle.module.eval()
    rows = []
    with torch.no_grad():
        for i in range(0, len(arr), 256):
            x = _to_nchw(arr[i : i + 256], dtype)
            rows.append(F.softmax(handle.module(x), dim=1).double().numpy())
    return np.concatenate(rows, axis=0)


def predict_labels(handle: ClassifierHandle, batch) -> np.ndarray:
    return predict(handle, batch).argmax(axis=1)


def accuracy(handle: ClassifierHandle, images: list[LabeledImage]) -> float:
    labels = predict_labels(handle, [li.image for li in images])
    return float(np.mean([p == li.label for p, li in zip(labels, images)]))


def input_gradient(handle: ClassifierHandle, img: np.ndarray, label: int) -> np.ndarray:
    """Gradient of the cross-entropy loss at (img, label) w.r.t. the pixels."""
    if not 0 <= label < handle.num_classes:
        raise ValueError(f"label {label} outside [0, {handle.num_classes})")
    arr = np.asarray(img, dtype=np.float64)[None]
    _check_shapes(handle, arr)
    dtype = next(handle.module.parameters()).dtype
    handle.module.eval()
    x = _to_nchw(arr, dtype).requires_grad_(True)
    loss = F.cross_entropy(handle.module(x), torch.tensor([label]))
    loss.backward()
    return x.grad[0].permute(1, 2, 0).double().numpy()


def _load_split(folder: str, seed: int):
    """Return (train, test) LabeledImage lists from folder.

    A folder containing train/ and test/ subfolders is used as-is; otherwise
    the images are split 80/20 deterministically.
    """
    train_dir = os.path.join(folder, "train")
    test_dir = os.path.join(folder, "test")
    if os.path.isdir(train_dir) and os.path.isdir(test_dir):
        return load_labeled_folder(train_dir).images, load_labeled_folder(test_dir).images
    images = load_labeled_folder(folder).images
    order = np.random.default_rng(seed).permutation(len(images))
    cut = max(1, int(0.8 * len(images)))
    return [images[i] for i in order[:cut]], [images[i] for i in order[cut:]]


def train_desk_classifier(
    dataset_folder: str,
    arch: str = "small_conv_A",
    seed: int = 0,
    epochs: int = 16,
    batch_size: int = 128,
    learning_rate: float = 1e-3,
    flip_augment: bool = True,
    noise_augment_255: float = 12.0,
    label_smoothing: float = 0.0,
) -> tuple[ClassifierHandle, TrainReport]:
    """Train a desk classifier; deterministic given (dataset, arch, seed).

    noise_augment_255 adds per-batch Gaussian pixel noise of random amplitude
    up to the given level (0-255 scale) during training. This buys tolerance
    to random residuals (codec artifacts, reconstruction error) without
    meaningfully blunting white-box gradient attacks, mirroring how large
    natural-image models behave. label_smoothing spreads a fraction of the
    target mass across the other classes, the usual fix for overconfident
    logits; note it also dampens loss gradients at the clean input, so
    smoothed models tend to resist small gradient attacks.
    """
    train_set, test_set = _load_split(dataset_folder, seed)
    labels = sorted({li.label for li in train_set})
    if len(labels) < 2:
        raise TrainingError(f"need at least 2 classes, found {len(labels)}")
    num_classes = max(labels) + 1
    shape = train_set[0].image.shape

    xs = np.stack([li.image for li in train_set])
    ys = np.array([li.label for li in train_set], dtype=np.int64)
    if flip_augment:
        xs = np.concatenate([xs, xs[:, :, ::-1, :]])
        ys = np.concatenate([ys, ys])

    torch.manual_seed(seed)
    module = _build(arch, num_classes, shape[2])
    opt = torch.optim.Adam(module.parameters(), lr=learning_rate)
    x_all = _to_nchw(xs, torch.float32)
    y_all = torch.from_numpy(ys)

    shuffler = torch.Generator().manual_seed(seed)
    module.train()
    for _ in range(epochs):
        order = torch.randperm(len(x_all), generator=shuffler)
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            xb = x_all[idx]
            if noise_augment_255 > 0:
                amp = noise_augment_255 / 255.0
                scales = amp * torch.rand((len(idx), 1, 1, 1), generator=shuffler)
                noise = torch.randn(xb.shape, generator=shuffler)
                xb = (xb + scales * noise).clamp(0.0, 1.0)
            opt.zero_grad()
            loss = F.cross_entropy(module(xb), y_all[idx], label_smoothing=label_smoothing)
            loss.backward()
            opt.step()
    module.eval()

    tag = os.path.basename(os.path.normpath(dataset_folder))
    handle = ClassifierHandle(
        identity=f"{arch}@{tag}#seed{seed}",
        arch=arch,
        num_classes=num_classes,
        input_shape=shape,
        module=module,
    )
    report = TrainReport(epochs, accuracy(handle, test_set), seed)
    return handle, report


def save_checkpoint(handle: ClassifierHandle, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(
        {
            "identity": handle.identity,
            "arch": handle.arch,
            "num_classes": handle.num_classes,
            "input_shape": tuple(handle.input_shape),
            "state_dict": handle.module.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str) -> ClassifierHandle:
    blob = torch.load(path, weights_only=True)
    module = _build(blob["arch"], blob["num_classes"], blob["input_shape"][2])
    module.load_state_dict(blob["state_dict"])
    module.eval()
    return ClassifierHandle(
        identity=blob["identity"],
        arch=blob["arch"],
        num_classes=blob["num_classes"],
        input_shape=tuple(blob["input_shape"]),
        module=module,
    )
