"""FADDefend: perturbation-graded adversarial defense.

Inputs are graded by a blind PCA noise estimate on weak-texture patches and
routed to a defense matched to the perturbation level: JPEG compression plus
a mirror flip for light perturbations, an untrained-generator reconstruction
in front of the same step for heavy ones. The package also ships the L-inf
attack suite, small reference classifiers, and an experiment harness used to
evaluate the defense end to end.
"""

from .attacks import AttackSpec, craft_dataset, derive_seed, run_attack
from .classifiers import (
    ClassifierHandle,
    TrainReport,
    input_gradient,
    load_checkpoint,
    predict,
    predict_labels,
    save_checkpoint,
    train_desk_classifier,
)
from .data import (
    FolderDataset,
    load_labeled_folder,
    load_png,
    make_desk_dataset,
    render_desk_image,
    save_labeled_set,
    save_png,
)
from .dip import DipConfig, DipResult, GeneratorSpec, dip_reconstruct, large_path_defend
from .errors import (
    CalibrationError,
    DatasetError,
    DimensionError,
    EncodingError,
    FadDefendError,
    OptimizationError,
    TrainingError,
)
from .harness import (
    DEFENSE_VARIANTS,
    EvalReport,
    EvalRow,
    ExperimentConfig,
    RuntimeRow,
    cmd_attack,
    cmd_bench,
    cmd_calibrate,
    cmd_dip_trace,
    cmd_evaluate,
    cmd_ingest,
    cmd_qf_sweep,
    cmd_train,
    environment_fingerprint,
)
from .image_core import LabeledImage, extract_patches, luminance, psnr, validate_image
from .noise_estimator import (
    EstimatorConfig,
    PerturbationEstimate,
    Route,
    estimate_sigma,
    grade,
)
from .pipeline import (
    DefenseConfig,
    RoutingRecord,
    calibrate_threshold,
    defend,
    defend_and_classify,
    desk_defense_config,
)
from .preprocess import PreprocessConfig, jpeg_roundtrip, mirror_flip, small_path_defend

__version__ = "0.1.0"

__all__ = [
    "AttackSpec",
    "CalibrationError",
    "ClassifierHandle",
    "DEFENSE_VARIANTS",
    "DatasetError",
    "DefenseConfig",
    "DimensionError",
    "DipConfig",
    "DipResult",
    "EncodingError",
    "EstimatorConfig",
    "EvalReport",
    "EvalRow",
    "ExperimentConfig",
    "FadDefendError",
    "FolderDataset",
    "GeneratorSpec",
    "LabeledImage",
    "OptimizationError",
    "PerturbationEstimate",
    "PreprocessConfig",
    "Route",
    "RoutingRecord",
    "RuntimeRow",
    "TrainReport",
    "TrainingError",
    "calibrate_threshold",
    "cmd_attack",
    "cmd_bench",
    "cmd_calibrate",
    "cmd_dip_trace",
    "cmd_evaluate",
    "cmd_ingest",
    "cmd_qf_sweep",
    "cmd_train",
    "craft_dataset",
    "defend",
    "defend_and_classify",
    "derive_seed",
    "desk_defense_config",
    "dip_reconstruct",
    "environment_fingerprint",
    "estimate_sigma",
    "extract_patches",
    "grade",
    "input_gradient",
    "jpeg_roundtrip",
    "large_path_defend",
    "load_checkpoint",
    "load_labeled_folder",
    "load_png",
    "luminance",
    "make_desk_dataset",
    "mirror_flip",
    "predict",
    "predict_labels",
    "psnr",
    "render_desk_image",
    "run_attack",
    "save_checkpoint",
    "save_labeled_set",
    "save_png",
    "small_path_defend",
    "train_desk_classifier",
    "validate_image",
]
