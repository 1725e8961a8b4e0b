"""Universal additive input perturbations that make a frozen model forget.

A forget vector ``delta`` is added to every input. It is fitted by minimising

    mean_f max(f_y(x + delta) - max_{k != y} f_k(x + delta), -tau)
        + lambda1 * CE(retain, x + delta) + lambda2 * ||delta||^2

with momentum SGD and an exponentially decaying learning rate. The model is
only read.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ._rng import rng_for
from .datasets import ClassWise, ForgetSplit, LabeledDataset
from .nn import MLP, ConfigError, InputError, LossSpec, ShapeError, forward_logits, loss_and_input_gradient, margin_from_logits


class OptimizationError(RuntimeError):
    """Non-finite objective; ``last_finite`` holds the last good iterate."""

    def __init__(self, message: str, last_finite: np.ndarray, iteration: int):
        super().__init__(message)
        self.last_finite = last_finite
        self.iteration = iteration


@dataclass(frozen=True)
class ForgetVectorConfig:
    tau: float = 1.0
    lambda1: float = 3.0
    lambda2: float = 1.0
    lr0: float = 0.1
    momentum: float = 0.9
    decay: float = 0.9
    batch_size: int | None = 256
    max_iterations: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.tau < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("tau, lambda1 and lambda2 must be nonnegative")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def for_split(cls, split: ForgetSplit, **overrides) -> "ForgetVectorConfig":
        """Scenario defaults: lambda1 = 3 for class-wise, 1 for random forgetting."""
        lambda1 = 3.0 if isinstance(split.spec, ClassWise) else 1.0
        return cls(**{"lambda1": lambda1, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ForgetVector:
    delta: np.ndarray
    provenance: str = "direct"
    weights: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        if d.ndim != 1:
            raise ShapeError("forget vector must be one-dimensional")
        if not np.all(np.isfinite(d)):
            raise InputError("forget vector entries must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)

    @property
    def dim(self) -> int:
        return self.delta.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "ForgetVector":
        return cls(np.zeros(dim))


def apply_perturbation(x, fv: ForgetVector | None, clamp: bool = False, image_shape=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if fv is None:
        return x
    if x.ndim != 2 or x.shape[1] != fv.dim:
        raise ShapeError(f"cannot add a {fv.dim}-dim vector to inputs of shape {x.shape}")
    out = x + fv.delta
    if clamp and image_shape is not None:
        out = np.clip(out, 0.0, 1.0)
    return out


def margin_loss(model: MLP, x_perturbed, labels, tau: float) -> float:
    return margin_from_logits(forward_logits(model, x_perturbed), labels, tau)


def data_terms(model: MLP, delta: np.ndarray, forget_batch, retain_batch, tau: float, lambda1: float) -> tuple[float, np.ndarray]:
    """Margin term plus weighted retain CE, and their gradient w.r.t. ``delta``."""
    xf, yf = forget_batch
    xr, yr = retain_batch if retain_batch is not None else (np.zeros((0, len(delta))), np.zeros(0, np.int64))
    if len(yf) == 0:
        raise InputError("forget batch is empty")
    if len(yr) == 0 and lambda1 > 0:
        raise InputError("retain batch is empty but lambda1 > 0")
    x = np.concatenate([np.asarray(xf, float), np.asarray(xr, float)]) + delta
    y = np.concatenate([np.asarray(yf, np.int64), np.asarray(yr, np.int64)])
    loss, dx = loss_and_input_gradient(model, x, y, LossSpec("composite", tau, lambda1, len(yf)))
    return loss, dx.sum(axis=0)


def unlearn_objective(model: MLP, delta, forget_batch, retain_batch, cfg: ForgetVectorConfig) -> tuple[float, np.ndarray]:
    delta = np.asarray(delta, dtype=np.float64)
    loss, grad = data_terms(model, delta, forget_batch, retain_batch, cfg.tau, cfg.lambda1)
    return loss + cfg.lambda2 * float(delta @ delta), grad + 2.0 * cfg.lambda2 * delta


def _accuracy(model: MLP, x: np.ndarray, y: np.ndarray) -> float:
    return 100.0 * float(np.mean(forward_logits(model, x).argmax(axis=1) == y))


def momentum_descent(
    param0: np.ndarray,
    objective: Callable[[np.ndarray, tuple, tuple | None], tuple[float, np.ndarray]],
    to_delta: Callable[[np.ndarray], np.ndarray],
    model: MLP,
    forget: LabeledDataset,
    retain: LabeledDataset,
    cfg: ForgetVectorConfig,
    stream: str,
) -> tuple[np.ndarray, list[dict]]:
    """Shared loop for forget vectors and composition weights.

    One iteration is one pass over the forget set in ``batch_size`` chunks,
    each paired with a uniformly drawn retain batch of the same size.
    """
    rng = rng_for(cfg.seed, stream)
    param = np.array(param0, dtype=np.float64)
    velocity = np.zeros_like(param)
    nf, nr = len(forget), len(retain)
    bs_f = nf if cfg.batch_size is None else cfg.batch_size
    bs_r = nr if cfg.batch_size is None else min(cfg.batch_size, nr)
    use_retain = nr > 0
    trace = []
    for it in range(cfg.max_iterations):
        lr = cfg.lr0 * cfg.decay ** it
        order = rng.permutation(nf) if cfg.batch_size is not None else np.arange(nf)
        losses = []
        for start in range(0, nf, bs_f):
            fidx = order[start:start + bs_f]
            fb = (forget.features[fidx], forget.labels[fidx])
            rb = None
            if use_retain:
                ridx = rng.choice(nr, size=bs_r, replace=False) if cfg.batch_size is not None else np.arange(nr)
                rb = (retain.features[ridx], retain.labels[ridx])
            with np.errstate(over="ignore", invalid="ignore"):
                # divergence is detected explicitly below
                loss, grad = objective(param, fb, rb)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise OptimizationError(f"non-finite objective at iteration {it}", param.copy(), it)
            losses.append(loss)
            with np.errstate(over="ignore", invalid="ignore"):
                velocity = cfg.momentum * velocity + grad
                step = param - lr * velocity
            if not np.all(np.isfinite(step)):
                raise OptimizationError(f"non-finite iterate at iteration {it}", param.copy(), it)
            param = step
        delta = to_delta(param)
        trace.append({
            "iteration": it,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "ua": 100.0 - _accuracy(model, forget.features + delta, forget.labels),
            "ra": _accuracy(model, retain.features + delta, retain.labels) if use_retain else float("nan"),
        })
    return param, trace


def optimize_forget_vector(
    model: MLP, data: LabeledDataset, split: ForgetSplit, cfg: ForgetVectorConfig
) -> tuple[ForgetVector, list[dict]]:
    if data.dim != model.input_dim:
        raise ShapeError("dataset and model input widths differ")
    forget, retain = split.forget(data), split.retain(data)
    if len(forget) == 0:
        raise InputError("forget set is empty")
    if len(retain) == 0 and cfg.lambda1 > 0:
        raise InputError("retain set is empty but lambda1 > 0")

    def objective(delta, fb, rb):
        return unlearn_objective(model, delta, fb, rb, cfg)

    delta, trace = momentum_descent(
        np.zeros(data.dim), objective, lambda d: d, model, forget, retain, cfg, "forget-vector"
    )
    return ForgetVector(delta, "direct", None, cfg.to_dict()), trace


