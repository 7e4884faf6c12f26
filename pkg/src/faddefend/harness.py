"""Experiment manager: attack grids, defense comparisons, sweeps, benchmarks.

Commands take an ExperimentConfig, write machine-readable artifacts
(manifests, PNG sets, CSV tables, JSON reports) under its output directory,
and return the in-memory result. Five defense variants are compared:
none, jpeg-only, jpeg+flip, dip+jpeg+flip (reconstruction forced on every
image), and the routed defense that grades each input first. Variants share
intermediate results through a stage cache so that, e.g., the routed
variant never recomputes a reconstruction the forced variant already did.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import FAMILIES, AttackSpec, craft_dataset, derive_seed
from .classifiers import ClassifierHandle, load_checkpoint, predict_labels, train_desk_classifier
from .data import load_labeled_folder, load_png, save_png
from .dip import dip_reconstruct
from .errors import DatasetError
from .image_core import LabeledImage, psnr
from .noise_estimator import Route, estimate_sigma, grade
from .pipeline import DefenseConfig, calibrate_threshold
from .preprocess import codec_identity, jpeg_roundtrip, mirror_flip

DEFENSE_VARIANTS = ("none", "jpeg-only", "jpeg+flip", "dip+jpeg+flip", "faddefend")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_dir: str
    out_dir: str
    surrogate_checkpoint: str = ""
    target_checkpoint: str = ""
    families: tuple[str, ...] = FAMILIES
    epsilons_255: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    variants: tuple[str, ...] = DEFENSE_VARIANTS
    n_eval: int = 100
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.families or not self.epsilons_255:
            raise ValueError("attack grid is empty")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown attack families: {sorted(unknown)}")
        unknown = set(self.variants) - set(DEFENSE_VARIANTS)
        if unknown:
            raise ValueError(f"unknown defense variants: {sorted(unknown)}")
        if self.n_eval < 1:
            raise ValueError("n_eval must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        os.makedirs(self.out_dir, exist_ok=True)
        probe = os.path.join(self.out_dir, ".write_probe")
        try:
            with open(probe, "w") as fh:
                fh.write("ok")
            os.remove(probe)
        except OSError as exc:
            raise ValueError(f"output directory not writable: {self.out_dir}") from exc


@dataclass(frozen=True)
class EvalRow:
    defense: str
    family: str
    epsilon_255: float
    accuracy: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy out of range: {self.accuracy}")
        if self.n <= 0:
            raise ValueError(f"n must be positive, got {self.n}")


@dataclass(frozen=True)
class RuntimeRow:
    defense: str
    mean_seconds_per_image: float
    peak_memory_mb: float
    total_seconds: float
    n: int


@dataclass
class EvalReport:
    rows: list[EvalRow]
    runtime: list[RuntimeRow]
    fingerprint: dict
    provenance: dict
    cache_stats: dict

    def to_json(self) -> str:
        payload = {
            "rows": [vars(r) for r in self.rows],
            "runtime": [vars(r) for r in self.runtime],
            "fingerprint": self.fingerprint,
            "provenance": self.provenance,
            "cache_stats": self.cache_stats,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["defense", "family", "epsilon_255", "accuracy", "n"])
        for r in self.rows:
            w.writerow([r.defense, r.family, r.epsilon_255, f"{r.accuracy:.4f}", r.n])
        return buf.getvalue()

    def runtime_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["defense", "mean_seconds_per_image", "peak_memory_mb", "total_seconds", "n"])
        for r in self.runtime:
            w.writerow(
                [
                    r.defense,
                    f"{r.mean_seconds_per_image:.4f}",
                    f"{r.peak_memory_mb:.1f}",
                    f"{r.total_seconds:.2f}",
                    r.n,
                ]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["defense            family    eps    accuracy      n"]
        for r in self.rows:
            lines.append(
                f"{r.defense:<18} {r.family:<9} {r.epsilon_255:>4g}    {r.accuracy:.4f}  {r.n:>5}"
            )
        if self.runtime:
            lines.append("")
            lines.append("defense            s/image   peak MB   total s")
            for r in self.runtime:
                lines.append(
                    f"{r.defense:<18} {r.mean_seconds_per_image:>7.3f}"
                    f"   {r.peak_memory_mb:>7.1f}   {r.total_seconds:>7.2f}"
                )
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str, stem: str = "report"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
            fh.write(self.to_json())
        with open(os.path.join(out_dir, f"{stem}_rows.csv"), "w") as fh:
            fh.write(self.rows_csv())
        with open(os.path.join(out_dir, f"{stem}_runtime.csv"), "w") as fh:
            fh.write(self.runtime_csv())
        with open(os.path.join(out_dir, f"{stem}.txt"), "w") as fh:
            fh.write(self.to_text())


def environment_fingerprint() -> dict:
    import PIL
    import scipy
    import torch

    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "pillow": PIL.__version__,
        "codec": codec_identity(),
        "cpu_count": os.cpu_count(),
        "memory_method": "peak resident set size sampled at 20 ms via psutil",
    }


class _PeakRss:
    """Samples resident memory on a daemon thread; peak_mb after stop()."""

    def __init__(self, interval: float = 0.02):
        import psutil

        self._proc = psutil.Process()
        self._interval = interval
        self._stop = threading.Event()
        self._peak = 0
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def _loop(self):
        while not self._stop.is_set():
            self._peak = max(self._peak, self._proc.memory_info().rss)
            self._stop.wait(self._interval)

    def __enter__(self):
        self._peak = self._proc.memory_info().rss
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._peak = max(self._peak, self._proc.memory_info().rss)

    @property
    def peak_mb(self) -> float:
        return self._peak / (1024 * 1024)


class StageCache:
    """Memoizes per-image stage outputs and counts hits/misses per stage.

    Keys are (stage name, image id); the id must encode everything upstream
    of the stage (the harness uses the source_id, which is unique per image
    within one attack cell evaluation).
    """

    def __init__(self):
        self._store: dict[tuple[str, str], object] = {}
        self.hits: dict[str, int] = {}
        self.misses: dict[str, int] = {}

    def get(self, stage: str, key: str, compute):
        full = (stage, key)
        if full in self._store:
            self.hits[stage] = self.hits.get(stage, 0) + 1
        else:
            self.misses[stage] = self.misses.get(stage, 0) + 1
            self._store[full] = compute()
        return self._store[full]

    def stats(self) -> dict:
        return {
            "hits": dict(sorted(self.hits.items())),
            "misses": dict(sorted(self.misses.items())),
            "total_hits": sum(self.hits.values()),
            "total_misses": sum(self.misses.values()),
        }


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _dip_seed(cfg: DefenseConfig, source_id: str) -> int:
    # same derivation the routed pipeline uses, so stage outputs are shareable
    return derive_seed(cfg.dip.noise_seed, source_id) if source_id else cfg.dip.noise_seed


class _Defender:
    """Applies one defense variant per image through a shared StageCache.

    jpeg_key_prefix distinguishes compression stages between configs that
    share the cache (the QF sweep); reconstruction and sigma stages do not
    depend on the quality factor, so their keys stay bare.
    """

    def __init__(self, cfg: DefenseConfig, cache: StageCache, jpeg_key_prefix: str = ""):
        self.cfg = cfg
        self.cache = cache
        self.prefix = jpeg_key_prefix

    def _jpeg(self, img, sid):
        pp = self.cfg.preprocess
        return self.cache.get(
            "jpeg",
            self.prefix + sid,
            lambda: jpeg_roundtrip(img, pp.quality_factor, pp.chroma_subsampling),
        )

    def _jpeg_flip(self, img, sid):
        return self.cache.get("flip", self.prefix + sid, lambda: mirror_flip(self._jpeg(img, sid)))

    def _dip(self, img, sid):
        def compute():
            dip_cfg = replace(self.cfg.dip, noise_seed=_dip_seed(self.cfg, sid))
            return dip_reconstruct(img, self.cfg.generator, dip_cfg).reconstruction

        return self.cache.get("dip", sid, compute)

    def _dip_jpeg_flip(self, img, sid):
        recon = self._dip(img, sid)
        pp = self.cfg.preprocess
        compressed = self.cache.get(
            "dip_jpeg",
            self.prefix + sid,
            lambda: jpeg_roundtrip(recon, pp.quality_factor, pp.chroma_subsampling),
        )
        return self.cache.get("dip_flip", self.prefix + sid, lambda: mirror_flip(compressed))

    def _sigma(self, img, sid) -> float:
        return self.cache.get(
            "sigma", sid, lambda: estimate_sigma(img, self.cfg.estimator).sigma
        )

    def apply(self, variant: str, img: np.ndarray, sid: str) -> np.ndarray:
        if variant == "none":
            return img
        if variant == "jpeg-only":
            return self._jpeg(img, sid)
        if variant == "jpeg+flip":
            return self._jpeg_flip(img, sid)
        if variant == "dip+jpeg+flip":
            return self._dip_jpeg_flip(img, sid)
        if variant == "faddefend":
            sigma = self._sigma(img, sid)
            route = grade_sigma(sigma, self.cfg.threshold)
            if route is Route.SMALL:
                return self._jpeg_flip(img, sid)
            return self._dip_jpeg_flip(img, sid)
        raise ValueError(f"unknown defense variant {variant!r}")


def grade_sigma(sigma: float, threshold: float) -> Route:
    """Route from a precomputed sigma, matching the estimator's tie rule."""
    from .noise_estimator import PerturbationEstimate

    est = PerturbationEstimate(sigma=sigma, selected_patches=1, iterations_used=1, converged=True)
    return grade(est, threshold)


def _variant_accuracy(
    variant: str,
    images: list[LabeledImage],
    model: ClassifierHandle,
    defender: _Defender,
) -> float:
    defended = [defender.apply(variant, li.image, li.source_id) for li in images]
    preds = predict_labels(model, defended)
    return float(np.mean([p == li.label for p, li in zip(preds, images)]))


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(folder: str, out_path: str = "") -> dict:
    """Scan a class-labeled PNG folder into a dataset manifest.

    Lossy-format files are skipped with a warning row (pre-compressed inputs
    would contaminate the small-perturbation path); unreadable files are
    listed and the run continues. An empty result is an error.
    """
    ds = load_labeled_folder(folder)
    manifest = {
        "folder": os.path.abspath(folder),
        "classes": ds.class_names,
        "n": len(ds.images),
        "images": [{"source_id": li.source_id, "label": li.label} for li in ds.images],
        "warnings": ds.warnings,
    }
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def cmd_train(
    dataset_dir: str,
    out_path: str,
    arch: str = "small_conv_A",
    seed: int = 0,
    epochs: int = 16,
) -> dict:
    handle, report = train_desk_classifier(dataset_dir, arch=arch, seed=seed, epochs=epochs)
    from .classifiers import save_checkpoint

    save_checkpoint(handle, out_path)
    return {
        "checkpoint": out_path,
        "arch": arch,
        "seed": seed,
        "epochs": report.epochs,
        "test_accuracy": report.final_test_accuracy,
    }


def _cell_dir(out_dir: str, family: str, eps: float) -> str:
    return os.path.join(out_dir, family, f"eps{eps:g}")


def save_attack_cell(
    out_dir: str, adv: list[LabeledImage], manifest: dict
) -> str:
    """Persist one (family, epsilon) cell: PNG per image plus manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for li in adv:
        fname = li.source_id.replace("/", "__")
        if not fname.endswith(".png"):
            fname += ".png"
        save_png(li.image, os.path.join(out_dir, fname))
        files[li.source_id] = fname
    manifest = dict(manifest)
    manifest["labels"] = {li.source_id: li.label for li in adv}
    manifest["files"] = files
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_attack_cell(cell_dir: str) -> tuple[list[LabeledImage], dict, str]:
    """Read back a persisted cell; returns (images, manifest, manifest sha256)."""
    path = os.path.join(cell_dir, "manifest.json")
    if not os.path.isfile(path):
        raise DatasetError(f"missing manifest: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    images = []
    for sid, fname in sorted(manifest["files"].items()):
        img = load_png(os.path.join(cell_dir, fname))
        images.append(LabeledImage(img, int(manifest["labels"][sid]), sid))
    if not images:
        raise DatasetError(f"empty attack cell: {cell_dir}")
    return images, manifest, _sha256_file(path)


def _eval_subset(cfg: ExperimentConfig) -> list[LabeledImage]:
    ds = load_labeled_folder(os.path.join(cfg.dataset_dir, "test"))
    rng = np.random.default_rng(cfg.seed)
    idx = rng.permutation(len(ds.images))[: cfg.n_eval]
    return [ds.images[i] for i in sorted(idx)]


def cmd_attack(cfg: ExperimentConfig) -> dict:
    """Craft the (families x epsilons) grid; one directory per cell."""
    model = load_checkpoint(cfg.surrogate_checkpoint)
    clean = _eval_subset(cfg)
    out = {}
    for family in cfg.families:
        for eps in cfg.epsilons_255:
            spec = AttackSpec(
                family=family,
                epsilon=eps,
                random_start=(family == "pgd"),
                seed=cfg.seed,
            )
            adv, manifest = craft_dataset(model, clean, spec)
            cell = _cell_dir(os.path.join(cfg.out_dir, "attacks"), family, eps)
            save_attack_cell(cell, adv, manifest)
            out[f"{family}/eps{eps:g}"] = cell
    return out


def cmd_evaluate(cfg: ExperimentConfig, transfer: bool = False) -> EvalReport:
    """Accuracy matrix: defense variants x (clean + attack cells).

    With transfer=True the target checkpoint classifies sets crafted on the
    surrogate (black-box analog); defenses also run against the target.
    Missing cells are recorded as gaps in provenance, not failures.
    """
    ckpt = cfg.target_checkpoint if transfer else cfg.surrogate_checkpoint
    if transfer and not cfg.target_checkpoint:
        raise ValueError("transfer evaluation needs a target checkpoint")
    model = load_checkpoint(ckpt)
    clean = _eval_subset(cfg)

    cells: list[tuple[str, float, list[LabeledImage], str]] = [("clean", 0.0, clean, "")]
    gaps = []
    for family in cfg.families:
        for eps in cfg.epsilons_255:
            cell = _cell_dir(os.path.join(cfg.out_dir, "attacks"), family, eps)
            try:
                images, _, sha = load_attack_cell(cell)
            except DatasetError:
                gaps.append(f"{family}/eps{eps:g}")
                continue
            cells.append((family, eps, images, sha))

    rows = []
    cache_stats = {}
    provenance = {"model": _sha256_file(ckpt), "gaps": gaps, "cells": {}}
    for family, eps, images, sha in cells:
        cache = StageCache()
        defender = _Defender(cfg.defense, cache)
        for variant in cfg.variants:
            acc = _variant_accuracy(variant, images, model, defender)
            rows.append(EvalRow(variant, family, eps, acc, len(images)))
        key = "clean" if family == "clean" else f"{family}/eps{eps:g}"
        cache_stats[key] = cache.stats()
        if sha:
            provenance["cells"][key] = sha

    return EvalReport(
        rows=rows,
        runtime=[],
        fingerprint=environment_fingerprint(),
        provenance=provenance,
        cache_stats=cache_stats,
    )


def cmd_qf_sweep(
    cfg: ExperimentConfig,
    qf_list: tuple[int, ...] = (50, 70, 90, 95),
    family: str = "fgsm",
    epsilon_255: float = 8.0,
) -> list[dict]:
    """Accuracy vs quality factor for jpeg+flip and the routed defense.

    The reconstruction stage does not depend on the quality factor, so it is
    cached once per image across the whole sweep.
    """
    model = load_checkpoint(cfg.surrogate_checkpoint)
    cell = _cell_dir(os.path.join(cfg.out_dir, "attacks"), family, epsilon_255)
    images, _, sha = load_attack_cell(cell)

    cache = StageCache()
    rows = []
    for qf in qf_list:
        d_cfg = replace(cfg.defense, preprocess=replace(cfg.defense.preprocess, quality_factor=qf))
        defender = _Defender(d_cfg, cache, jpeg_key_prefix=f"qf{qf}:")
        for variant in ("jpeg+flip", "faddefend"):
            acc = _variant_accuracy(variant, images, model, defender)
            rows.append(
                {
                    "qf": qf,
                    "defense": variant,
                    "family": family,
                    "epsilon_255": epsilon_255,
                    "accuracy": acc,
                    "n": len(images),
                    "manifest_sha256": sha,
                }
            )

    sweep_dir = os.path.join(cfg.out_dir, "qf_sweep")
    os.makedirs(sweep_dir, exist_ok=True)
    with open(os.path.join(sweep_dir, "curve.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    with open(os.path.join(sweep_dir, "cache_stats.json"), "w") as fh:
        json.dump(cache.stats(), fh, indent=2, sort_keys=True)
    return rows


def _timed_variant(
    variant: str, images: list[LabeledImage], cfg: DefenseConfig
) -> RuntimeRow:
    # fresh cache per variant: benchmarks must not reuse another variant's work
    defender = _Defender(cfg, StageCache())
    with _PeakRss() as rss:
        t0 = time.perf_counter()
        for li in images:
            defender.apply(variant, li.image, li.source_id)
        total = time.perf_counter() - t0
    return RuntimeRow(variant, total / len(images), rss.peak_mb, total, len(images))


def cmd_bench(cfg: ExperimentConfig, images: list[LabeledImage]) -> EvalReport:
    """Wall time and peak memory: routed defense vs reconstruction-on-everything.

    Runs single-worker over identical inputs. The input set should mix both
    perturbation regimes; the report notes the measured route split.
    """
    if len(images) < 2:
        raise ValueError("benchmark set too small")
    routes = {"SMALL": 0, "LARGE": 0}
    for li in images:
        sigma = estimate_sigma(li.image, cfg.defense.estimator).sigma
        routes[grade_sigma(sigma, cfg.defense.threshold).name] += 1

    runtime = [
        _timed_variant("faddefend", images, cfg.defense),
        _timed_variant("dip+jpeg+flip", images, cfg.defense),
    ]
    ratio = runtime[0].total_seconds / runtime[1].total_seconds
    report = EvalReport(
        rows=[],
        runtime=runtime,
        fingerprint=environment_fingerprint(),
        provenance={"route_split": routes, "time_ratio_routed_over_forced": ratio},
        cache_stats={},
    )
    report.save(os.path.join(cfg.out_dir, "bench"), stem="bench")
    return report


def cmd_calibrate(
    cfg: ExperimentConfig,
    calib_set: list[LabeledImage],
    adversarial_ids: set[str] | None,
    candidate_thresholds,
    expected_accuracy: float = 0.5,
) -> tuple[float, list[tuple[float, float]]]:
    """Run the threshold sweep and persist the curve plus the chosen value."""
    model = load_checkpoint(cfg.surrogate_checkpoint)
    threshold, curve = calibrate_threshold(
        candidate_thresholds,
        calib_set,
        model,
        cfg.defense,
        expected_accuracy=expected_accuracy,
        adversarial_ids=adversarial_ids,
    )
    calib_dir = os.path.join(cfg.out_dir, "calibration")
    os.makedirs(calib_dir, exist_ok=True)
    with open(os.path.join(calib_dir, "curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "accuracy"])
        w.writerows([(f"{t:g}", f"{a:.6f}") for t, a in curve])
    with open(os.path.join(calib_dir, "result.json"), "w") as fh:
        json.dump(
            {
                "threshold": threshold,
                "expected_accuracy": expected_accuracy,
                "curve": curve,
                "n": len(calib_set),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    return threshold, curve


def cmd_dip_trace(
    cfg: ExperimentConfig, image: LabeledImage, every: int = 25, reference: np.ndarray | None = None
) -> list[dict]:
    """Reconstruction trajectory snapshots with loss (and psnr vs a reference)."""
    dip_cfg = replace(
        cfg.defense.dip,
        trajectory_every=every,
        noise_seed=_dip_seed(cfg.defense, image.source_id),
    )
    result = dip_reconstruct(image.image, cfg.defense.generator, dip_cfg)
    trace_dir = os.path.join(cfg.out_dir, "dip_trace")
    os.makedirs(trace_dir, exist_ok=True)
    rows = []
    for iteration, snap in result.trajectory:
        fname = f"iter{iteration:05d}.png"
        save_png(snap, os.path.join(trace_dir, fname))
        row = {
            "iteration": iteration,
            "loss": result.loss_history[iteration - 1],
            "file": fname,
        }
        if reference is not None:
            row["psnr_vs_reference"] = psnr(snap, reference)
        rows.append(row)
    with open(os.path.join(trace_dir, "trace.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    return rows
