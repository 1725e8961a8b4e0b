"""Forget-vector arithmetic: new vectors as weighted sums of class-wise ones."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .datasets import ClassWise, ForgetSplit, LabeledDataset, RandomSubset, split_forget_retain
from .forget_vector import ForgetVector, ForgetVectorConfig, data_terms, momentum_descent, optimize_forget_vector
from .nn import MLP, ConfigError, InputError, ShapeError, checksum, forward_logits


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClassVectorBank:
    vectors: tuple[ForgetVector, ...]
    fingerprint: str

    def __post_init__(self):
        if not self.vectors:
            raise InputError("bank is empty")
        dims = {v.dim for v in self.vectors}
        if len(dims) != 1:
            raise ShapeError("bank vectors differ in dimension")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors[0].dim

    def matrix(self) -> np.ndarray:
        """``(K, d)`` array with row ``k`` = class ``k`` vector."""
        return np.stack([v.delta for v in self.vectors])

    def check(self, model: MLP) -> None:
        if checksum(model) != self.fingerprint:
            raise CompatibilityError("bank was built for a different model")


def build_bank(model: MLP, data: LabeledDataset, seed: int = 0, **overrides) -> ClassVectorBank:
    """One class-wise forget vector per class, with class-wise defaults."""
    vectors = []
    for k in range(data.class_count):
        split = split_forget_retain(data, ClassWise(k))
        cfg = ForgetVectorConfig.for_split(split, seed=seed, **overrides)
        vectors.append(optimize_forget_vector(model, data, split, cfg)[0])
    return ClassVectorBank(tuple(vectors), checksum(model))


def compose(bank: ClassVectorBank, w, model: MLP | None = None) -> ForgetVector:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(bank),):
        raise ShapeError(f"need {len(bank)} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError("weights must be finite")
    if model is not None:
        bank.check(model)
    delta = np.zeros(bank.dim)
    for wk, vk in zip(w, bank.vectors):
        delta = delta + wk * vk.delta
    return ForgetVector(delta, "composed", w.copy())


def weight_config(**overrides) -> ForgetVectorConfig:
    """Composition defaults: lambda1 = lambda2 = 1, lr0 = 0.01."""
    return ForgetVectorConfig(**{"lambda1": 1.0, "lambda2": 1.0, "lr0": 0.01, **overrides})


def weight_objective(model: MLP, basis: np.ndarray, w, forget_batch, retain_batch, cfg: ForgetVectorConfig):
    """Objective over weights; the norm penalty is on ``w`` rather than on the vector."""
    w = np.asarray(w, dtype=np.float64)
    loss, g_delta = data_terms(model, basis.T @ w, forget_batch, retain_batch, cfg.tau, cfg.lambda1)
    return loss + cfg.lambda2 * float(w @ w), basis @ g_delta + 2.0 * cfg.lambda2 * w


def optimize_weights(
    model: MLP,
    bank: ClassVectorBank,
    data: LabeledDataset,
    split: ForgetSplit,
    cfg: ForgetVectorConfig | None = None,
) -> tuple[np.ndarray, ForgetVector, list[dict]]:
    bank.check(model)
    cfg = cfg or weight_config()
    forget, retain = split.forget(data), split.retain(data)
    if len(forget) == 0:
        raise InputError("forget set is empty")
    basis = bank.matrix()

    def objective(w, fb, rb):
        return weight_objective(model, basis, w, fb, rb, cfg)

    w, trace = momentum_descent(
        np.zeros(len(bank)), objective, lambda w: basis.T @ w, model, forget, retain, cfg, "composition"
    )
    fv = compose(bank, w)
    return w, replace(fv, config=cfg.to_dict()), trace


def grid_axis(low: float = -0.2, high: float = 0.2, step: float = 0.05) -> np.ndarray:
    if step <= 0 or high < low:
        raise ConfigError("empty grid")
    n = int(round((high - low) / step)) + 1
    return np.round(low + step * np.arange(n), 10)


@dataclass(frozen=True, eq=False)
class GridSweep:
    classes: tuple[int, int]
    axis: np.ndarray
    ua_gap: np.ndarray
    ra_gap: np.ndarray
    avg_gap: np.ndarray
    best: tuple[float, float]

    def rows(self) -> list[dict]:
        out = []
        for i, wa in enumerate(self.axis):
            for j, wb in enumerate(self.axis):
                out.append({
                    "w_a": float(wa), "w_b": float(wb),
                    "ua_gap": float(self.ua_gap[i, j]), "ra_gap": float(self.ra_gap[i, j]),
                    "avg_gap": float(self.avg_gap[i, j]),
                })
        return out


def _acc(model: MLP, x: np.ndarray, y: np.ndarray) -> float:
    return 100.0 * np.count_nonzero(forward_logits(model, x).argmax(axis=1) == y) / len(y)


def argmin_lexicographic(axis: np.ndarray, table: np.ndarray) -> tuple[float, float]:
    # row-major argmin returns the first minimum, i.e. smallest (w_a, w_b)
    i, j = np.unravel_index(int(np.argmin(table)), table.shape)
    return float(axis[i]), float(axis[j])


def grid_sweep_2d(
    model: MLP,
    bank: ClassVectorBank,
    classes: tuple[int, int],
    data: LabeledDataset,
    split: ForgetSplit,
    retrain_ua: float,
    retrain_ra: float,
    axis: Sequence[float] | None = None,
) -> GridSweep:
    """UA/RA gaps to Retrain for ``w_a * delta_a + w_b * delta_b`` on a square grid.

    ``retrain_ua``/``retrain_ra`` come from one retrained model for this forget
    subset, reused across cells.
    """
    bank.check(model)
    a, b = classes
    if not isinstance(split.spec, RandomSubset) or split.spec.classes is None or set(split.spec.classes) != {a, b}:
        raise ConfigError("grid sweep needs a random split restricted to the two swept classes")
    axis = grid_axis() if axis is None else np.asarray(axis, dtype=np.float64)
    if len(axis) == 0:
        raise ConfigError("empty grid")
    forget, retain = split.forget(data), split.retain(data)
    da, db = bank.vectors[a].delta, bank.vectors[b].delta
    n = len(axis)
    ua_gap, ra_gap = np.empty((n, n)), np.empty((n, n))
    for i, wa in enumerate(axis):
        for j, wb in enumerate(axis):
            delta = wa * da + wb * db
            ua = 100.0 - _acc(model, forget.features + delta, forget.labels)
            ra = _acc(model, retain.features + delta, retain.labels)
            ua_gap[i, j] = abs(ua - retrain_ua)
            ra_gap[i, j] = abs(ra - retrain_ra)
    avg = (ua_gap + ra_gap) / 2
    return GridSweep((a, b), axis, ua_gap, ra_gap, avg, argmin_lexicographic(axis, avg))
