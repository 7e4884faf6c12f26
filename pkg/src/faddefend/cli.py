"""Command line entry point.

Every flag can also come from a JSON config file (--config); explicit flags
win over file values, which win over built-in defaults. Subcommands mirror
the harness operations plus dataset generation.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .data import load_labeled_folder, make_desk_dataset
from .dip import DipConfig, GeneratorSpec
from .errors import DatasetError
from .harness import (
    ExperimentConfig,
    cmd_attack,
    cmd_bench,
    cmd_calibrate,
    cmd_dip_trace,
    cmd_evaluate,
    cmd_ingest,
    cmd_qf_sweep,
    cmd_train,
    load_attack_cell,
)
from .noise_estimator import EstimatorConfig
from .pipeline import DefenseConfig, desk_defense_config
from .preprocess import PreprocessConfig


def _add_defense_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("defense")
    g.add_argument("--desk", action="store_true", help="use the 32x32 tuned defense profile")
    g.add_argument("--threshold", type=float, default=None, help="routing threshold, 0-255 sigma")
    g.add_argument("--qf", type=int, default=None, help="JPEG quality factor")
    g.add_argument("--no-flip", action="store_true", help="disable the mirror flip stage")
    g.add_argument("--patch-side", type=int, default=None, help="estimator patch side")
    g.add_argument("--patch-stride", type=int, default=None, help="estimator patch stride")
    g.add_argument("--confidence", type=float, default=None, help="estimator selection confidence")
    g.add_argument("--dip-iterations", type=int, default=None, help="reconstruction iterations")
    g.add_argument("--dip-lr", type=float, default=None, help="reconstruction learning rate")
    g.add_argument("--dip-seed", type=int, default=None, help="reconstruction base noise seed")


def _defense_from_args(args) -> DefenseConfig:
    cfg = desk_defense_config() if args.desk else DefenseConfig()
    est, pre, dip = cfg.estimator, cfg.preprocess, cfg.dip
    if args.patch_side is not None:
        est = replace(est, patch_side=args.patch_side)
    if args.patch_stride is not None:
        est = replace(est, stride=args.patch_stride)
    if args.confidence is not None:
        est = replace(est, confidence=args.confidence)
    if args.qf is not None:
        pre = replace(pre, quality_factor=args.qf)
    if args.no_flip:
        pre = replace(pre, apply_flip=False)
    if args.dip_iterations is not None:
        dip = replace(dip, iterations=args.dip_iterations)
    if args.dip_lr is not None:
        dip = replace(dip, learning_rate=args.dip_lr)
    if args.dip_seed is not None:
        dip = replace(dip, noise_seed=args.dip_seed)
    kwargs = {"estimator": est, "preprocess": pre, "dip": dip}
    if args.threshold is not None:
        kwargs["threshold"] = args.threshold
    return replace(cfg, **kwargs)


def _experiment_from_args(args) -> ExperimentConfig:
    return ExperimentConfig(
        dataset_dir=args.dataset,
        out_dir=args.out,
        surrogate_checkpoint=getattr(args, "model", "") or "",
        target_checkpoint=getattr(args, "target_model", "") or "",
        families=tuple(args.families),
        epsilons_255=tuple(args.epsilons),
        defense=_defense_from_args(args),
        n_eval=args.n_eval,
        seed=args.seed,
    )


def _add_experiment_flags(p: argparse.ArgumentParser, need_model: bool = True):
    p.add_argument("--dataset", required=True, help="dataset root (train/ and test/ subfolders)")
    p.add_argument("--out", required=True, help="output directory")
    if need_model:
        p.add_argument("--model", required=True, help="classifier checkpoint path")
    p.add_argument("--families", nargs="+", default=["fgsm", "bim", "mifgsm", "pgd"])
    p.add_argument("--epsilons", nargs="+", type=float, default=[2.0, 4.0, 8.0, 16.0],
                   help="L-infinity budgets in 1/255 units")
    p.add_argument("--n-eval", type=int, default=100, help="evaluation subset size")
    p.add_argument("--seed", type=int, default=0)
    _add_defense_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faddefend",
        description="Perturbation-graded adversarial defense: estimate, route, defend.",
    )
    parser.add_argument("--config", default=None,
                        help="JSON file of flag defaults; explicit flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="render the 10-class 32x32 shape dataset")
    p.add_argument("out")
    p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--label-noise", type=float, default=0.0,
                   help="fraction of training images filed under a wrong class")

    p = sub.add_parser("ingest", help="scan a class-labeled PNG folder into a manifest")
    p.add_argument("folder")
    p.add_argument("--out", default="", help="manifest JSON path")

    p = sub.add_parser("train", help="train a desk classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--arch", default="small_conv_A", choices=["small_conv_A", "small_conv_B"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=16)

    p = sub.add_parser("attack", help="craft the (family x epsilon) adversarial grid")
    _add_experiment_flags(p)

    p = sub.add_parser("evaluate", help="accuracy matrix over defense variants")
    _add_experiment_flags(p)
    p.add_argument("--transfer", action="store_true",
                   help="classify surrogate-crafted sets with the target model")
    p.add_argument("--target-model", default="", help="target checkpoint for --transfer")

    p = sub.add_parser("calibrate", help="sweep routing thresholds on a mixed set")
    _add_experiment_flags(p)
    p.add_argument("--candidates", nargs="+", type=float,
                   default=[0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 6.0, 8.0, 12.0])
    p.add_argument("--expected-accuracy", type=float, default=0.5)
    p.add_argument("--include-clean", action="store_true",
                   help="count clean members in the calibration metric")
    p.add_argument("--n-calib", type=int, default=500, help="total calibration set size")

    p = sub.add_parser("qf-sweep", help="accuracy vs JPEG quality factor")
    _add_experiment_flags(p)
    p.add_argument("--qfs", nargs="+", type=int, default=[50, 70, 90, 95])
    p.add_argument("--sweep-family", default="fgsm")
    p.add_argument("--sweep-epsilon", type=float, default=8.0)

    p = sub.add_parser("bench", help="runtime/memory: routed vs reconstruct-everything")
    _add_experiment_flags(p)
    p.add_argument("--n-bench", type=int, default=50)
    p.add_argument("--bench-epsilon", type=float, default=16.0)

    p = sub.add_parser("dip-trace", help="save reconstruction snapshots over iterations")
    _add_experiment_flags(p)
    p.add_argument("--every", type=int, default=25)
    p.add_argument("--index", type=int, default=0, help="test-set image index to trace")

    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    probe, _ = parser.parse_known_args(argv)
    if probe.config:
        with open(probe.config) as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise SystemExit("--config must contain a JSON object of flag values")
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in file_values.items()})
    return parser.parse_args(argv)


def _build_calib_set(cfg: ExperimentConfig, args):
    """Clean examples plus one attack strength slice per grid cell,
    sized to n_calib total; returns (set, adversarial ids)."""
    from .attacks import AttackSpec, craft_dataset
    from .classifiers import load_checkpoint

    model = load_checkpoint(cfg.surrogate_checkpoint)
    ds = load_labeled_folder(f"{cfg.dataset_dir}/test")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(ds.images))
    cells = [(f, e) for f in cfg.families for e in cfg.epsilons_255]
    n_adv = args.n_calib // 2
    per_cell = max(1, n_adv // len(cells))
    n_clean = args.n_calib - per_cell * len(cells)
    if n_clean < 0:
        raise DatasetError(
            f"n-calib={args.n_calib} cannot cover {len(cells)} attack cells; "
            f"need at least {2 * len(cells)} or a smaller family/epsilon grid")

    clean = [ds.images[i] for i in order[:n_clean]]
    calib, adv_ids = list(clean), set()
    cursor = n_clean
    for family, eps in cells:
        base = [ds.images[i] for i in order[cursor : cursor + per_cell]]
        cursor += per_cell
        spec = AttackSpec(family=family, epsilon=eps,
                          random_start=(family == "pgd"), seed=cfg.seed)
        adv, _ = craft_dataset(model, base, spec)
        for li in adv:
            tagged = replace(li, source_id=f"{family}/eps{eps:g}/{li.source_id}")
            calib.append(tagged)
            adv_ids.add(tagged.source_id)
    return calib, adv_ids


def main(argv=None) -> int:
    args = parse_args(argv)

    if args.command == "make-dataset":
        make_desk_dataset(args.out, n_train=args.n_train, n_test=args.n_test,
                          seed=args.seed, size=args.size, label_noise=args.label_noise)
        print(f"dataset written to {args.out}")
        return 0

    if args.command == "ingest":
        manifest = cmd_ingest(args.folder, args.out)
        print(json.dumps({k: manifest[k] for k in ("folder", "classes", "n", "warnings")},
                         indent=2))
        return 0

    if args.command == "train":
        info = cmd_train(args.dataset, args.out, arch=args.arch,
                         seed=args.seed, epochs=args.epochs)
        print(json.dumps(info, indent=2))
        return 0

    cfg = _experiment_from_args(args)

    if args.command == "attack":
        cells = cmd_attack(cfg)
        print(json.dumps(cells, indent=2, sort_keys=True))
        return 0

    if args.command == "evaluate":
        report = cmd_evaluate(cfg, transfer=args.transfer)
        report.save(cfg.out_dir)
        print(report.to_text())
        return 0

    if args.command == "calibrate":
        calib, adv_ids = _build_calib_set(cfg, args)
        ids = None if args.include_clean else adv_ids
        threshold, curve = cmd_calibrate(cfg, calib, ids, args.candidates,
                                         expected_accuracy=args.expected_accuracy)
        print(f"threshold: {threshold:.4f}")
        for t, a in curve:
            print(f"  t={t:<8g} accuracy={a:.4f}")
        return 0

    if args.command == "qf-sweep":
        rows = cmd_qf_sweep(cfg, tuple(args.qfs), family=args.sweep_family,
                            epsilon_255=args.sweep_epsilon)
        for r in rows:
            print(f"qf={r['qf']:<3} {r['defense']:<10} accuracy={r['accuracy']:.4f}")
        return 0

    if args.command == "bench":
        from .harness import _cell_dir

        cell = _cell_dir(f"{cfg.out_dir}/attacks", args.families[0], args.bench_epsilon)
        adv, _, _ = load_attack_cell(cell)
        ds = load_labeled_folder(f"{cfg.dataset_dir}/test")
        half = args.n_bench // 2
        mixed = ds.images[:half] + adv[: args.n_bench - half]
        report = cmd_bench(cfg, mixed)
        print(report.to_text())
        print(json.dumps(report.provenance, indent=2))
        return 0

    if args.command == "dip-trace":
        ds = load_labeled_folder(f"{cfg.dataset_dir}/test")
        image = ds.images[args.index]
        rows = cmd_dip_trace(cfg, image, every=args.every, reference=image.image)
        for r in rows:
            extra = f" psnr={r['psnr_vs_reference']:.2f}" if "psnr_vs_reference" in r else ""
            print(f"iter={r['iteration']:<6} loss={r['loss']:.6f}{extra}")
        return 0

    raise SystemExit(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
