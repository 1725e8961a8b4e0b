"""Machine unlearning with input-space forget vectors on frozen classifiers."""
from .baselines import UnlearnMethodConfig, finetune, gradient_ascent, random_label, retrain, run_method
from .composition import ClassVectorBank, CompatibilityError, build_bank, compose, grid_sweep_2d, optimize_weights
from .datasets import (
    ClassWise,
    CorruptionSpec,
    ForgetSplit,
    LabeledDataset,
    PgdConfig,
    RandomSubset,
    corrupt,
    make_blobs,
    make_patterns,
    pgd_attack,
    split_forget_retain,
    train_test_split,
)
from .evaluation import UnlearnReport, avg_gap, evaluate, robustness_sweep, transfer_eval
from .forget_vector import ForgetVector, ForgetVectorConfig, OptimizationError, apply_perturbation, optimize_forget_vector
from .nn import MLP, ConfigError, InputError, ShapeError, TrainConfig, checksum, forward_logits, param_count, train_classifier
from .persistence import ArtifactExistsError, ChecksumError, load_model, load_vector, save_model, save_vector

__version__ = "0.1.0"
