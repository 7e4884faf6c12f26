"""White-box L-infinity attack suite: FGSM, BIM, MIFGSM, PGD.

All four share one iteration engine, so the textbook reductions
(PGD without random start = BIM, MIFGSM with zero momentum = BIM,
single-step BIM with alpha = epsilon = FGSM) hold bit-exactly rather
than approximately.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .classifiers import ClassifierHandle, input_gradient, predict_labels
from .errors import DatasetError
from .image_core import LabeledImage, validate_image

FAMILIES = ("fgsm", "bim", "mifgsm", "pgd")


@dataclass(frozen=True)
class AttackSpec:
    """Attack family plus budget; epsilon and step_size are in 1/255 units."""

    family: str
    epsilon: float
    steps: int | None = None  # None -> 1 for fgsm, 10 otherwise
    step_size: float | None = None  # None -> epsilon for fgsm, 2*epsilon/steps otherwise
    momentum: float = 1.0  # mifgsm decay
    random_start: bool = False  # pgd only
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        # epsilon = 0 is allowed as the degenerate no-op budget
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps is not None and self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.family == "fgsm" and self.steps not in (None, 1):
            raise ValueError("fgsm is single-step; steps must be 1")

    @property
    def effective_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return 1 if self.family == "fgsm" else 10

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.family == "fgsm":
            return self.epsilon
        return 2.0 * self.epsilon / self.effective_steps


def _iterative_linf(
    model: ClassifierHandle,
    img: np.ndarray,
    label: int,
    eps: float,
    steps: int,
    alpha: float,
    use_momentum: bool,
    mu: float,
    random_start: bool,
    seed: int,
) -> np.ndarray:
    """Projected sign-ascent core shared by all four families (eps/alpha in [0,1] scale)."""
    x0 = np.asarray(validate_image(img), dtype=np.float64)
    if eps == 0.0:
        return x0.copy()
    x = x0
    if random_start:
        rng = np.random.default_rng(seed)
        x = np.clip(x0 + rng.uniform(-eps, eps, size=x0.shape), 0.0, 1.0)
    g = np.zeros_like(x0)
    for _ in range(steps):
        grad = input_gradient(model, x, label)
        if use_momentum:
            l1 = float(np.abs(grad).sum())
            if l1 > 0.0:  # zero gradient leaves the accumulator unchanged
                g = mu * g + grad / l1
            direction = np.sign(g)
        else:
            direction = np.sign(grad)
        x = np.clip(x + alpha * direction, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
    return x


def _run(model, img, label, spec: AttackSpec, use_momentum: bool, random_start: bool):
    return _iterative_linf(
        model,
        img,
        label,
        eps=spec.epsilon / 255.0,
        steps=spec.effective_steps,
        alpha=spec.effective_step_size / 255.0,
        use_momentum=use_momentum,
        mu=spec.momentum,
        random_start=random_start,
        seed=spec.seed,
    )


def fgsm(model, img, label, spec: AttackSpec) -> np.ndarray:
    """x_adv = clamp(x + eps * sign(grad)); untargeted single step."""
    if spec.family != "fgsm":
        raise ValueError(f"spec.family is {spec.family!r}, expected 'fgsm'")
    one_step = replace(spec, steps=1, step_size=spec.step_size or spec.epsilon)
    return _run(model, img, label, one_step, use_momentum=False, random_start=False)


def bim(model, img, label, spec: AttackSpec) -> np.ndarray:
    """Iterated FGSM with projection onto the eps-ball each step."""
    if spec.family != "bim":
        raise ValueError(f"spec.family is {spec.family!r}, expected 'bim'")
    return _run(model, img, label, spec, use_momentum=False, random_start=False)


def mifgsm(model, img, label, spec: AttackSpec) -> np.ndarray:
    """BIM with an L1-normalized momentum accumulator."""
    if spec.family != "mifgsm":
        raise ValueError(f"spec.family is {spec.family!r}, expected 'mifgsm'")
    return _run(model, img, label, spec, use_momentum=True, random_start=False)


def pgd(model, img, label, spec: AttackSpec) -> np.ndarray:
    """BIM with an optional seeded uniform random start inside the eps-ball."""
    if spec.family != "pgd":
        raise ValueError(f"spec.family is {spec.family!r}, expected 'pgd'")
    return _run(model, img, label, spec, use_momentum=False, random_start=spec.random_start)


_DISPATCH = {"fgsm": fgsm, "bim": bim, "mifgsm": mifgsm, "pgd": pgd}


def run_attack(model, img, label, spec: AttackSpec) -> np.ndarray:
    return _DISPATCH[spec.family](model, img, label, spec)


def derive_seed(base_seed: int, source_id: str) -> int:
    """Stable per-image seed from (base seed, source id); hash-based so it
    does not depend on set ordering or Python's randomized str hash."""
    digest = hashlib.blake2b(
        f"{base_seed}:{source_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") >> 1  # keep it positive


def craft_dataset(
    model: ClassifierHandle, clean_set, spec: AttackSpec
) -> tuple[list[LabeledImage], dict]:
    """Screen to correctly-classified images, attack each survivor.

    The manifest records the spec, model identity, per-image L-infinity norms
    and seeds. Crafting happens in float space; callers persisting to PNG
    accept quantization of at most 1/510 per pixel, as noted in the manifest.
    """
    clean_set = list(clean_set)
    if not clean_set:
        raise DatasetError("clean_set is empty")
    preds = predict_labels(model, [li.image for li in clean_set])
    survivors = [li for li, p in zip(clean_set, preds) if p == li.label]
    if not survivors:
        raise DatasetError("no clean examples survived screening")

    adv_images: list[LabeledImage] = []
    per_image = []
    for li in survivors:
        img_seed = derive_seed(spec.seed, li.source_id)
        adv = run_attack(model, li.image, li.label, replace(spec, seed=img_seed))
        linf = float(np.abs(adv - li.image).max() * 255.0)
        adv_images.append(LabeledImage(adv, li.label, li.source_id))
        per_image.append({"source_id": li.source_id, "linf_255": linf, "seed": img_seed})

    manifest = {
        "family": spec.family,
        "epsilon_255": spec.epsilon,
        "steps": spec.effective_steps,
        "step_size_255": spec.effective_step_size,
        "momentum": spec.momentum if spec.family == "mifgsm" else None,
        "random_start": spec.random_start if spec.family == "pgd" else None,
        "base_seed": spec.seed,
        "model_identity": model.identity,
        "n_input": len(clean_set),
        "n_screened": len(survivors),
        "quantization_note": "crafted in float space; PNG storage quantizes by <= 1/510",
        "images": per_image,
    }
    return adv_images, manifest
