"""Universal adversarial perturbations: one shared flow field plus one shared
bounded noise map, produced by a generator network and evaluated across models."""

from .backbone import (
    ClassifierHyper,
    LabeledDataset,
    TargetModel,
    accuracy,
    build_small_cnn,
    ingest_cifar10,
    ingest_image_folder,
    load_checkpoint,
    make_synthetic_dataset,
    save_checkpoint,
    train_classifier,
)
from .errors import (
    DigestMismatchError,
    FileFormatError,
    TrainingDiverged,
    TruncatedFileError,
    VersionMismatchError,
)
from .evaluation import (
    AblationGrid,
    EvalReport,
    L2Report,
    TransferMatrix,
    ablation_grid,
    attack_success_rate,
    evaluate,
    export_image_triplets,
    l2_report,
    sample_size_study,
    transfer_matrix,
)
from .flowwarp import bilinear_warp, flow_budget, flow_tv_loss, scale_flow
from .generator import GeneratorArch, PerturbationGenerator, SeedPattern, init_generator, make_seed_pattern
from .objective import adversarial_loss, cross_entropy_per_sample, scaled_cross_entropy
from .perturb import AttackBudget, compose_adversarial, scale_noise
from .trainer import (
    TrainConfig,
    TrainLog,
    UniversalPerturbation,
    freeze_perturbation,
    load_generator,
    load_perturbation,
    random_perturbation,
    save_generator,
    save_perturbation,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "AttackBudget",
    "ClassifierHyper",
    "DigestMismatchError",
    "EvalReport",
    "FileFormatError",
    "GeneratorArch",
    "L2Report",
    "LabeledDataset",
    "PerturbationGenerator",
    "SeedPattern",
    "TargetModel",
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "TransferMatrix",
    "TruncatedFileError",
    "UniversalPerturbation",
    "VersionMismatchError",
    "accuracy",
    "adversarial_loss",
    "attack_success_rate",
    "ablation_grid",
    "bilinear_warp",
    "build_small_cnn",
    "compose_adversarial",
    "cross_entropy_per_sample",
    "evaluate",
    "export_image_triplets",
    "flow_budget",
    "flow_tv_loss",
    "freeze_perturbation",
    "ingest_cifar10",
    "ingest_image_folder",
    "init_generator",
    "l2_report",
    "load_checkpoint",
    "load_generator",
    "load_perturbation",
    "make_seed_pattern",
    "make_synthetic_dataset",
    "random_perturbation",
    "sample_size_study",
    "save_checkpoint",
    "save_generator",
    "save_perturbation",
    "scale_flow",
    "scale_noise",
    "scaled_cross_entropy",
    "train",
    "train_classifier",
    "transfer_matrix",
]
