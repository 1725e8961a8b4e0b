"""Model-update unlearning baselines: exact Retrain and approximate FT, RL, GA."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._rng import rng_for
from .datasets import ForgetSplit, LabeledDataset
from .nn import MLP, ConfigError, InputError, TrainConfig, sgd, train_classifier

METHODS = ("retrain", "finetune", "random_label", "gradient_ascent")


@dataclass(frozen=True)
class UnlearnMethodConfig:
    method: str = "finetune"
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown unlearning method {self.method!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("need learning_rate > 0, batch_size >= 1, epochs >= 0")


def retrain(data: LabeledDataset, split: ForgetSplit, layer_dims: Sequence[int], train_cfg: TrainConfig) -> MLP:
    """Fresh model trained on the retain set only, same pipeline as the original."""
    retain = split.retain(data)
    if len(retain) == 0:
        raise InputError("retain set is empty")
    return train_classifier(retain.features, retain.labels, layer_dims, train_cfg)


def _continue(model: MLP, x, y, cfg: UnlearnMethodConfig, stream: str, ascent: bool = False, history=None) -> MLP:
    return sgd(
        model, x, y,
        epochs=cfg.epochs, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        batch_size=cfg.batch_size, weight_decay=cfg.weight_decay, seed=cfg.seed,
        stream=stream, ascent=ascent, history=history,
    )


def finetune(model: MLP, data: LabeledDataset, split: ForgetSplit, cfg: UnlearnMethodConfig, history=None) -> MLP:
    retain = split.retain(data)
    if len(retain) == 0:
        raise InputError("retain set is empty")
    return _continue(model, retain.features, retain.labels, cfg, "finetune", history=history)


def random_relabel(labels: np.ndarray, class_count: int, seed: int) -> np.ndarray:
    """Uniform draw over the ``class_count - 1`` wrong classes for each label."""
    if class_count < 2:
        raise ConfigError("relabeling needs at least two classes")
    shift = rng_for(seed, "relabel").integers(1, class_count, size=len(labels))
    return (np.asarray(labels) + shift) % class_count


def random_label(model: MLP, data: LabeledDataset, split: ForgetSplit, cfg: UnlearnMethodConfig) -> MLP:
    """Fine-tune on relabeled forget rows together with the retain rows."""
    forget, retain = split.forget(data), split.retain(data)
    if len(forget) == 0:
        raise InputError("forget set is empty")
    y_forget = random_relabel(forget.labels, data.class_count, cfg.seed)
    x = np.concatenate([forget.features, retain.features])
    y = np.concatenate([y_forget, retain.labels])
    return _continue(model, x, y, cfg, "random_label")


def gradient_ascent(model: MLP, data: LabeledDataset, split: ForgetSplit, cfg: UnlearnMethodConfig, history=None) -> MLP:
    forget = split.forget(data)
    if len(forget) == 0:
        raise InputError("forget set is empty")
    return _continue(model, forget.features, forget.labels, cfg, "gradient_ascent", ascent=True, history=history)


def run_method(
    model: MLP,
    data: LabeledDataset,
    split: ForgetSplit,
    cfg: UnlearnMethodConfig,
    train_cfg: TrainConfig | None = None,
) -> MLP:
    if cfg.method == "retrain":
        if train_cfg is None:
            raise ConfigError("retrain needs the original training config")
        return retrain(data, split, model.layer_dims, train_cfg)
    if cfg.method == "finetune":
        return finetune(model, data, split, cfg)
    if cfg.method == "random_label":
        return random_label(model, data, split, cfg)
    return gradient_ascent(model, data, split, cfg)
