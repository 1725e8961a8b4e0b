"""Synthetic datasets, forget/retain splits and distribution-shift generators."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._rng import rng_for
from .nn import MLP, ConfigError, InputError, LossSpec, ShapeError, input_gradient

REFERENCE_EDGE = 224


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ShapeError(f"features {x.shape} and labels {y.shape} disagree")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != x.shape[1]:
            raise ShapeError(f"image_shape {self.image_shape} does not match {x.shape[1]} features")
        if not np.all(np.isfinite(x)):
            raise InputError("features must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count, self.image_shape)

    def with_features(self, features: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(features, self.labels, self.class_count, self.image_shape)


@dataclass(frozen=True)
class ClassWise:
    target: int


@dataclass(frozen=True)
class RandomSubset:
    """Random forgetting at ``ratio``; ``classes`` restricts the candidate pool."""

    ratio: float
    seed: int = 0
    classes: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ConfigError("forget ratio must lie in (0, 1)")


SplitSpec = ClassWise | RandomSubset


@dataclass(frozen=True, eq=False)
class ForgetSplit:
    forget_indices: np.ndarray
    retain_indices: np.ndarray
    spec: SplitSpec

    @property
    def forgotten_class(self) -> int | None:
        return self.spec.target if isinstance(self.spec, ClassWise) else None

    def forget(self, data: LabeledDataset) -> LabeledDataset:
        return data.subset(self.forget_indices)

    def retain(self, data: LabeledDataset) -> LabeledDataset:
        return data.subset(self.retain_indices)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    sigma: float = 0.0
    intensity: float = 0.0
    smoothing: float = 0.0
    offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "elastic"):
            raise ConfigError(f"unknown corruption {self.kind!r}")
        if min(self.sigma, self.intensity, self.smoothing, self.offset) < 0:
            raise ConfigError("corruption parameters must be nonnegative")


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 8 / 255
    steps: int = 7
    step_size: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 1:
            raise ConfigError("PGD needs epsilon >= 0 and steps >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError("PGD step size must be positive")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


def gn1(seed: int = 0) -> CorruptionSpec:
    return CorruptionSpec("gaussian", sigma=0.08, seed=seed)


def gn2(seed: int = 0) -> CorruptionSpec:
    return CorruptionSpec("gaussian", sigma=0.2, seed=seed)


def et1(seed: int = 0) -> CorruptionSpec:
    return CorruptionSpec("elastic", intensity=488.0, smoothing=170.8, offset=24.4, seed=seed)


def et2(seed: int = 0) -> CorruptionSpec:
    return CorruptionSpec("elastic", intensity=488.0, smoothing=19.52, offset=48.8, seed=seed)


# --------------------------------------------------------------------- generators


def make_blobs(
    classes: int = 5,
    dim: int = 16,
    per_class: int = 200,
    center_scale: float = 3.0,
    sigma: float = 0.3,
    seed: int = 0,
    as_image: bool = False,
) -> LabeledDataset:
    """Isotropic Gaussian clusters, globally min-max scaled into [0, 1].

    ``as_image`` declares the features a square single-channel image
    (``dim`` must be a perfect square), which turns on [0, 1] clipping for
    corruptions and enables the elastic transform.
    """
    edge = int(round(np.sqrt(dim)))
    if as_image and edge * edge != dim:
        raise ConfigError("as_image needs a square feature dimension")
    if classes < 2:
        raise ConfigError("need at least two classes")
    if per_class < 1 or dim < 1:
        raise ConfigError("per_class and dim must be positive")
    rng = rng_for(seed, "blobs")
    dirs = rng.standard_normal((classes, dim))
    centers = center_scale * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + sigma * rng.standard_normal((len(labels), dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return LabeledDataset(x, labels, classes, (edge, edge, 1) if as_image else None)


def _hamming_ok(t: np.ndarray, bank: list[np.ndarray], min_dist: float) -> bool:
    return all(np.count_nonzero(t != b) >= min_dist for b in bank)


def make_templates(classes: int, edge: int, seed: int, density: float = 0.5) -> np.ndarray:
    rng = rng_for(seed, "templates")
    min_dist = 0.2 * edge * edge
    bank: list[np.ndarray] = []
    for _ in range(10_000 * classes):
        if len(bank) == classes:
            break
        t = (rng.random(edge * edge) < density).astype(np.float64)
        if _hamming_ok(t, bank, min_dist):
            bank.append(t)
    else:
        raise ConfigError("could not draw sufficiently distinct templates")
    return np.stack(bank)


def make_patterns(
    classes: int = 10,
    edge: int = 16,
    per_class: int = 100,
    noise_sigma: float = 0.1,
    seed: int = 0,
    density: float = 0.5,
) -> LabeledDataset:
    """Seeded binary templates plus clipped Gaussian pixel noise (single channel)."""
    if edge < 4:
        raise ConfigError("edge must be at least 4 pixels")
    if classes < 2 or per_class < 1:
        raise ConfigError("need >= 2 classes and >= 1 sample per class")
    templates = make_templates(classes, edge, seed, density)
    rng = rng_for(seed, "pattern-noise")
    labels = np.repeat(np.arange(classes), per_class)
    x = templates[labels] + noise_sigma * rng.standard_normal((len(labels), edge * edge))
    return LabeledDataset(np.clip(x, 0.0, 1.0), labels, classes, (edge, edge, 1))


def train_test_split(data: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split; each class contributes ``round(test_fraction * n_k)`` test rows."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = rng_for(seed, "holdout")
    test = []
    for k in range(data.class_count):
        rows = np.flatnonzero(data.labels == k)
        n_test = int(round(test_fraction * len(rows)))
        test.append(rng.permutation(rows)[:n_test])
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(len(data)), test_idx)
    return data.subset(train_idx), data.subset(test_idx)


# --------------------------------------------------------------------- splits


def split_forget_retain(data: LabeledDataset, spec: SplitSpec) -> ForgetSplit:
    n = len(data)
    if isinstance(spec, ClassWise):
        forget = np.flatnonzero(data.labels == spec.target)
        if len(forget) == 0:
            raise InputError(f"class {spec.target} has no rows")
    elif isinstance(spec, RandomSubset):
        pool = np.arange(n) if spec.classes is None else np.flatnonzero(np.isin(data.labels, spec.classes))
        if len(pool) == 0:
            raise InputError("no rows available for random forgetting")
        size = int(round(spec.ratio * len(pool)))
        forget = np.sort(rng_for(spec.seed, "split").choice(pool, size=size, replace=False))
    else:
        raise ConfigError(f"unknown split spec {spec!r}")
    retain = np.setdiff1d(np.arange(n), forget)
    return ForgetSplit(forget.astype(np.int64), retain.astype(np.int64), spec)


def empty_split(data: LabeledDataset) -> ForgetSplit:
    """Degenerate split with nothing to forget (retrain then equals training)."""
    return ForgetSplit(np.zeros(0, np.int64), np.arange(len(data), dtype=np.int64), RandomSubset(0.5))


def spec_to_dict(spec: SplitSpec) -> dict:
    if isinstance(spec, ClassWise):
        return {"kind": "class", "target": int(spec.target)}
    return {
        "kind": "random",
        "ratio": float(spec.ratio),
        "seed": int(spec.seed),
        "classes": None if spec.classes is None else [int(c) for c in spec.classes],
    }


def spec_from_dict(d: dict) -> SplitSpec:
    kind = d.get("kind")
    if kind == "class":
        return ClassWise(int(d["target"]))
    if kind == "random":
        classes = d.get("classes")
        return RandomSubset(float(d["ratio"]), int(d.get("seed", 0)), None if classes is None else tuple(int(c) for c in classes))
    raise ConfigError(f"unknown split kind {kind!r}")


def save_split(path, split: ForgetSplit) -> None:
    spec = spec_to_dict(split.spec)
    payload = {"spec": spec, "seed": spec.get("seed"), "forget_indices": split.forget_indices.tolist()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_split(path, n_rows: int) -> ForgetSplit:
    d = json.loads(Path(path).read_text())
    forget = np.asarray(d["forget_indices"], dtype=np.int64)
    if len(forget) and (forget.min() < 0 or forget.max() >= n_rows or len(np.unique(forget)) != len(forget)):
        raise InputError("split indices out of range or duplicated")
    spec = spec_from_dict(d["spec"])
    return ForgetSplit(np.sort(forget), np.setdiff1d(np.arange(n_rows), forget), spec)


# --------------------------------------------------------------------- CSV


def save_csv(path, data: LabeledDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(data.dim)])
        for label, row in zip(data.labels, data.features):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv(path, class_count: int | None = None, image_shape: Sequence[int] | None = None) -> LabeledDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise InputError(f"{path}: expected header starting with 'label'")
    d = len(rows[0]) - 1
    if rows[0][1:] != [f"f{i}" for i in range(d)]:
        raise InputError(f"{path}: feature columns must be f0..f{d - 1}")
    body = rows[1:]
    if any(len(r) != d + 1 for r in body):
        raise InputError(f"{path}: ragged rows")
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), d)
    k = class_count if class_count is not None else int(labels.max()) + 1
    return LabeledDataset(x, labels, k, None if image_shape is None else tuple(int(v) for v in image_shape))


# --------------------------------------------------------------------- shifts


def gaussian_corrupt(x, spec: CorruptionSpec, image_shape=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.kind != "gaussian":
        raise ConfigError("gaussian_corrupt needs a gaussian spec")
    if spec.sigma == 0:
        return x.copy()
    out = x + spec.sigma * rng_for(spec.seed, "gaussian").standard_normal(x.shape)
    return np.clip(out, 0.0, 1.0) if image_shape is not None else out


def elastic_field(shape: tuple[int, int], spec: CorruptionSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (dy, dx) displacement for one image of ``shape``.

    Parameters are in 224-pixel reference units and rescaled by edge/224.
    """
    h, w = shape
    s = h / REFERENCE_EDGE
    field_ = rng.uniform(-1.0, 1.0, size=(2, h, w))
    if spec.smoothing > 0:
        field_ = np.stack([ndimage.gaussian_filter(c, spec.smoothing * s, mode="reflect") for c in field_])
    norm = np.sqrt(field_[0] ** 2 + field_[1] ** 2)
    field_ = field_ / np.maximum(norm, 1.0)
    field_ *= spec.intensity * s * s
    # corner jitter, bilinearly spread so every pixel moves by a convex mix of the corners
    o = spec.offset * s
    corners = rng.uniform(-o, o, size=(2, 2, 2)) if o > 0 else np.zeros((2, 2, 2))
    v = np.linspace(0.0, 1.0, h)[:, None]
    u = np.linspace(0.0, 1.0, w)[None, :]
    for c in range(2):
        field_[c] += (
            corners[c, 0, 0] * (1 - v) * (1 - u)
            + corners[c, 0, 1] * (1 - v) * u
            + corners[c, 1, 0] * v * (1 - u)
            + corners[c, 1, 1] * v * u
        )
    return field_[0], field_[1]


def elastic_transform(x, spec: CorruptionSpec, image_shape) -> np.ndarray:
    if image_shape is None:
        raise InputError("elastic transform needs image-shaped data")
    if spec.kind != "elastic":
        raise ConfigError("elastic_transform needs an elastic spec")
    x = np.asarray(x, dtype=np.float64)
    if spec.intensity == 0 and spec.offset == 0:
        return x.copy()
    h, w, ch = image_shape
    rng = rng_for(spec.seed, "elastic")
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty_like(x)
    for i, row in enumerate(x):
        img = row.reshape(h, w, ch)
        dy, dx = elastic_field((h, w), spec, rng)
        coords = [np.clip(grid_y + dy, 0, h - 1), np.clip(grid_x + dx, 0, w - 1)]
        warped = np.stack(
            [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(ch)],
            axis=-1,
        )
        out[i] = warped.reshape(-1)
    return np.clip(out, 0.0, 1.0)


def corrupt(x, spec: CorruptionSpec, image_shape=None) -> np.ndarray:
    if spec.kind == "gaussian":
        return gaussian_corrupt(x, spec, image_shape)
    return elastic_transform(x, spec, image_shape)


def pgd_attack(model: MLP, x, labels, cfg: PgdConfig, image_shape=None, delta=None) -> np.ndarray:
    """l-inf PGD on cross-entropy, starting at ``x`` (no random start).

    With ``delta`` the attacked pipeline is ``x -> model(x + delta)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    shift = 0.0 if delta is None else np.asarray(delta, dtype=np.float64)
    adv = x.copy()
    for _ in range(cfg.steps):
        g = input_gradient(model, adv + shift, labels, LossSpec("ce"))
        adv = np.clip(adv + cfg.alpha * np.sign(g), x - cfg.epsilon, x + cfg.epsilon)
    if image_shape is not None:
        adv = np.clip(adv, 0.0, 1.0)
    return adv
