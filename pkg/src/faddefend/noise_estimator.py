"""Blind perturbation-level estimation from a single image.

The estimate drives routing: a scalar noise level sigma (std. dev. on the
0-255 intensity scale) is recovered by selecting weak-texture patches and
taking the smallest eigenvalue of their sample covariance, iterating the
selection threshold until the estimate stabilises.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

import numpy as np

from .image_core import extract_patches, luminance, validate_image

# Empirical null-distribution table for the texture-strength statistic:
# one percentile per (patch_side, confidence), computed from seeded synthetic
# unit-variance Gaussian patches. The statistic is quadratic in the patch, so
# the threshold for variance v is v * table[(patch_side, confidence)].
_NULL_SAMPLES = 10_000
_NULL_SEED = 19930907
_null_table: dict[tuple[int, float], float] = {}
_null_lock = threading.Lock()


class Route(enum.Enum):
    SMALL = "small"
    LARGE = "large"


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs for the weak-texture / PCA noise estimator."""

    patch_side: int = 7
    stride: int = 3
    confidence: float = 0.99
    max_iterations: int = 10
    convergence_tol: float = 1e-5  # absolute sigma change, 0-255 scale

    def __post_init__(self):
        if self.patch_side < 3:
            raise ValueError(f"patch_side must be >= 3, got {self.patch_side}")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"confidence must be in (0, 1), got {self.confidence}")


@dataclass(frozen=True)
class PerturbationEstimate:
    """Estimated noise level plus estimator diagnostics."""

    sigma: float
    selected_patches: int
    iterations_used: int
    converged: bool


def _gradient_columns(patches: np.ndarray, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal/vertical [-1, 1] difference responses on the common
    (side-1) x (side-1) support, flattened per patch."""
    p = patches.reshape(-1, side, side)
    dh = p[:, :, 1:] - p[:, :, :-1]
    dv = p[:, 1:, :] - p[:, :-1, :]
    k = side - 1
    return dh[:, :k, :].reshape(len(p), -1), dv[:, :, :k].reshape(len(p), -1)


def _strengths(patches: np.ndarray, side: int) -> np.ndarray:
    gh, gv = _gradient_columns(patches, side)
    a = np.einsum("ij,ij->i", gh, gh)
    c = np.einsum("ij,ij->i", gv, gv)
    b = np.einsum("ij,ij->i", gh, gv)
    # largest eigenvalue of the 2x2 PSD matrix [[a, b], [b, c]]
    half = 0.5 * (a + c)
    return half + np.sqrt(np.square(0.5 * (a - c)) + np.square(b))


def texture_strength(patch: np.ndarray) -> float:
    """Largest eigenvalue of G^T G, G the 2-column matrix of horizontal and
    vertical difference responses over the patch. Zero for constant patches."""
    vec = np.asarray(patch, dtype=np.float64).ravel()
    side = int(round(np.sqrt(vec.size)))
    if side * side != vec.size:
        raise ValueError(f"patch length {vec.size} is not a perfect square")
    return float(_strengths(vec[None, :], side)[0])


def strength_percentile(patch_side: int, confidence: float) -> float:
    """Null-distribution percentile of the strength statistic for unit-variance
    Gaussian patches; cached, deterministic, safe under concurrent first use."""
    key = (patch_side, confidence)
    val = _null_table.get(key)
    if val is not None:
        return val
    with _null_lock:
        val = _null_table.get(key)
        if val is None:
            rng = np.random.default_rng(_NULL_SEED)
            patches = rng.standard_normal((_NULL_SAMPLES, patch_side * patch_side))
            val = float(np.percentile(_strengths(patches, patch_side), 100.0 * confidence))
            _null_table[key] = val
    return val


def _smallest_cov_eigenvalue(patches: np.ndarray) -> float:
    cov = np.cov(patches, rowvar=False)
    return max(float(np.linalg.eigvalsh(cov)[0]), 0.0)


def estimate_sigma(img: np.ndarray, cfg: EstimatorConfig = EstimatorConfig()) -> PerturbationEstimate:
    """Estimate the noise standard deviation of an image (0-255 scale).

    Works on luminance. Starts from the smallest covariance eigenvalue of all
    patches, then alternates weak-texture selection (strength below the
    confidence percentile of the pure-noise null at the current variance) with
    re-estimation, up to ``max_iterations``. Falls back to the previous
    estimate with ``converged=False`` if too few patches survive selection.
    """
    arr = validate_image(img)
    y = luminance(arr)[:, :, 0] * 255.0
    side = cfg.patch_side
    dim = side * side
    patches = extract_patches(y, side, cfg.stride)

    sigma2 = _smallest_cov_eigenvalue(patches)
    selected = len(patches)
    strengths = _strengths(patches, side)
    tau_unit = strength_percentile(side, cfg.confidence)

    converged = False
    iterations = 0
    for _ in range(cfg.max_iterations):
        iterations += 1
        mask = strengths < sigma2 * tau_unit
        n_sel = int(mask.sum())
        if n_sel < dim + 1:
            # too few weak-texture patches for a full-rank covariance
            return PerturbationEstimate(float(np.sqrt(sigma2)), selected, iterations, False)
        sigma2_new = _smallest_cov_eigenvalue(patches[mask])
        delta = abs(np.sqrt(sigma2_new) - np.sqrt(sigma2))
        sigma2 = sigma2_new
        selected = n_sel
        if delta < cfg.convergence_tol:
            converged = True
            break

    return PerturbationEstimate(float(np.sqrt(sigma2)), selected, iterations, converged)


def grade(estimate: PerturbationEstimate, threshold: float) -> Route:
    """SMALL iff sigma < threshold; ties route LARGE (the stronger defense)."""
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    return Route.SMALL if estimate.sigma < threshold else Route.LARGE
