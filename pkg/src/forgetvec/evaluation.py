"""Unlearning metrics (UA, RA, TA, MIA-Efficacy), gaps to Retrain, shift sweeps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._rng import derive_seed, rng_for
from .datasets import (
    ClassWise,
    CorruptionSpec,
    ForgetSplit,
    LabeledDataset,
    PgdConfig,
    SplitSpec,
    corrupt,
    gn1,
    gn2,
    et1,
    et2,
    pgd_attack,
)
from .forget_vector import ForgetVector, apply_perturbation
from .nn import MLP, ConfigError, InputError, forward_logits, param_count, softmax

METRICS = ("ua", "mia_efficacy", "ra", "ta")


class EmptySetError(InputError):
    pass


def accuracy(model: MLP, x, labels, fv: ForgetVector | None = None) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptySetError("accuracy of an empty set is undefined")
    pred = forward_logits(model, apply_perturbation(x, fv)).argmax(axis=1)
    return 100.0 * np.count_nonzero(pred == labels) / len(labels)


def compute_ua(model: MLP, forget: LabeledDataset, fv: ForgetVector | None = None) -> float:
    return 100.0 - accuracy(model, forget.features, forget.labels, fv)


def ta_rows(test: LabeledDataset, spec: SplitSpec) -> LabeledDataset:
    """Test rows scored for TA; the forgotten class is dropped under class-wise forgetting."""
    if isinstance(spec, ClassWise):
        test = test.subset(np.flatnonzero(test.labels != spec.target))
    if len(test) == 0:
        raise EmptySetError("no test rows left after excluding the forgotten class")
    return test


def compute_ta(model: MLP, test: LabeledDataset, spec: SplitSpec, fv: ForgetVector | None = None) -> float:
    kept = ta_rows(test, spec)
    return accuracy(model, kept.features, kept.labels, fv)


def true_label_confidence(model: MLP, x, labels, fv: ForgetVector | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    p = softmax(forward_logits(model, apply_perturbation(x, fv)))
    return p[np.arange(len(labels)), labels]


@dataclass(frozen=True)
class MiaPredictor:
    """Confidence threshold attack: member iff confidence >= threshold."""

    threshold: float
    train_balanced_accuracy: float

    def is_member(self, confidence) -> np.ndarray:
        return np.asarray(confidence) >= self.threshold


def fit_threshold(member_conf, nonmember_conf) -> MiaPredictor:
    """Threshold maximising balanced accuracy over distinct values and midpoints."""
    m = np.sort(np.asarray(member_conf, dtype=np.float64))
    u = np.sort(np.asarray(nonmember_conf, dtype=np.float64))
    if len(m) == 0 or len(u) == 0:
        raise InputError("both member and non-member pools must be nonempty")
    values = np.unique(np.concatenate([m, u]))
    candidates = np.unique(np.concatenate([values, (values[:-1] + values[1:]) / 2]))
    tp = len(m) - np.searchsorted(m, candidates, side="left")
    tn = np.searchsorted(u, candidates, side="left")
    score = tp / len(m) + tn / len(u)
    best = int(np.argmax(score))
    return MiaPredictor(float(candidates[best]), float(score[best] / 2))


def train_mia(
    model: MLP,
    retain: LabeledDataset,
    test: LabeledDataset,
    seed: int,
    fv: ForgetVector | None = None,
) -> MiaPredictor:
    if len(retain) == 0 or len(test) == 0:
        raise InputError("MIA needs nonempty retain and test pools")
    n = min(len(retain), len(test))
    rng = rng_for(seed, "mia")
    ridx = np.sort(rng.choice(len(retain), size=n, replace=False))
    tidx = np.sort(rng.choice(len(test), size=n, replace=False))
    members = true_label_confidence(model, retain.features[ridx], retain.labels[ridx], fv)
    nonmembers = true_label_confidence(model, test.features[tidx], test.labels[tidx], fv)
    return fit_threshold(members, nonmembers)


def mia_efficacy(predictor: MiaPredictor, model: MLP, forget: LabeledDataset, fv: ForgetVector | None = None) -> float:
    if len(forget) == 0:
        raise EmptySetError("MIA-Efficacy of an empty forget set is undefined")
    conf = true_label_confidence(model, forget.features, forget.labels, fv)
    n_tn = np.count_nonzero(~predictor.is_member(conf))
    return 100.0 * n_tn / len(forget)


def mean_gap(gaps: Sequence[float]) -> float:
    return math.fsum(abs(g) for g in gaps) / len(gaps)


@dataclass(frozen=True)
class UnlearnReport:
    method: str
    seed: int
    ua: float
    mia_efficacy: float
    ra: float
    ta: float
    gaps: dict | None = None
    avg_gap: float | None = None
    runtime_seconds: float | None = None
    param_count: int | None = None
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRICS}

    def against(self, reference: "UnlearnReport | None") -> "UnlearnReport":
        if reference is None:
            return replace(self, gaps=None, avg_gap=None)
        gaps = {k: abs(getattr(self, k) - getattr(reference, k)) for k in METRICS}
        return replace(self, gaps=gaps, avg_gap=mean_gap(list(gaps.values())))

    def to_dict(self, include_runtime: bool = True) -> dict:
        r2 = lambda v: None if v is None else round(float(v), 2)
        return {
            "method": self.method,
            "seed": int(self.seed),
            "ua": r2(self.ua),
            "mia_efficacy": r2(self.mia_efficacy),
            "ra": r2(self.ra),
            "ta": r2(self.ta),
            "gaps": None if self.gaps is None else {k: r2(v) for k, v in self.gaps.items()},
            "avg_gap": r2(self.avg_gap),
            "runtime_s": r2(self.runtime_seconds) if include_runtime else None,
            "param_count": self.param_count,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnReport":
        return cls(
            method=d["method"], seed=int(d["seed"]), ua=d["ua"], mia_efficacy=d["mia_efficacy"],
            ra=d["ra"], ta=d["ta"], gaps=d.get("gaps"), avg_gap=d.get("avg_gap"),
            runtime_seconds=d.get("runtime_s"), param_count=d.get("param_count"), extra=d.get("extra", {}),
        )


def avg_gap(report: UnlearnReport, retrain_report: UnlearnReport) -> float:
    return mean_gap([getattr(report, k) - getattr(retrain_report, k) for k in METRICS])


def evaluate(
    model: MLP,
    train: LabeledDataset,
    test: LabeledDataset,
    split: ForgetSplit,
    *,
    fv: ForgetVector | None = None,
    retrain_ref: UnlearnReport | None = None,
    method: str = "model",
    seed: int = 0,
    runtime_seconds: float | None = None,
    trainable_params: int | None = None,
    detail: bool = False,
) -> UnlearnReport:
    """Score ``model`` (with ``fv`` applied to every evaluation set when given).

    Without ``retrain_ref`` the gaps and Avg. Gap stay ``None``. ``detail``
    adds per-set accuracy and MIA non-member rates under ``extra["sets"]``.
    """
    forget, retain = split.forget(train), split.retain(train)
    ta_set = ta_rows(test, split.spec)
    predictor = train_mia(model, retain, ta_set, seed, fv)
    if trainable_params is None:
        trainable_params = fv.dim if fv is not None else param_count(model)
    report = UnlearnReport(
        method=method,
        seed=seed,
        ua=compute_ua(model, forget, fv),
        mia_efficacy=mia_efficacy(predictor, model, forget, fv),
        ra=accuracy(model, retain.features, retain.labels, fv),
        ta=accuracy(model, ta_set.features, ta_set.labels, fv),
        runtime_seconds=runtime_seconds,
        param_count=trainable_params,
    )
    if detail:
        sets = {}
        for name, part in (("forget", forget), ("retain", retain), ("test", ta_set)):
            conf = true_label_confidence(model, part.features, part.labels, fv)
            sets[name] = {
                "accuracy": accuracy(model, part.features, part.labels, fv),
                "mia_nonmember": 100.0 * np.count_nonzero(~predictor.is_member(conf)) / len(part),
            }
        report = replace(report, extra={"sets": sets})
    return report.against(retrain_ref)


# --------------------------------------------------------------------- shifts

Perturbation = CorruptionSpec | PgdConfig | None


def default_suite(seed: int = 0) -> list[tuple[str, Perturbation]]:
    return [
        ("Benign", None),
        ("GN1", gn1(seed)),
        ("GN2", gn2(seed)),
        ("ET1", et1(seed)),
        ("ET2", et2(seed)),
        ("PGD", PgdConfig(seed=seed)),
    ]


def shift_dataset(model: MLP, data: LabeledDataset, pert: Perturbation, fv: ForgetVector | None, salt: str) -> LabeledDataset:
    if pert is None:
        return data
    if isinstance(pert, PgdConfig):
        delta = None if fv is None else fv.delta
        return data.with_features(pgd_attack(model, data.features, data.labels, pert, data.image_shape, delta))
    spec = replace(pert, seed=derive_seed(pert.seed, salt))
    return data.with_features(corrupt(data.features, spec, data.image_shape))


def shifted_split(model: MLP, train: LabeledDataset, split: ForgetSplit, pert: Perturbation, fv: ForgetVector | None):
    """Training set with forget and retain rows shifted independently; split indices unchanged."""
    if pert is None:
        return train
    forget = shift_dataset(model, split.forget(train), pert, fv, "forget")
    retain = shift_dataset(model, split.retain(train), pert, fv, "retain")
    x = np.empty_like(train.features)
    x[split.forget_indices] = forget.features
    x[split.retain_indices] = retain.features
    return train.with_features(x)


def robustness_sweep(
    model: MLP,
    train: LabeledDataset,
    test: LabeledDataset,
    split: ForgetSplit,
    suite: Sequence[tuple[str, Perturbation]] | None = None,
    fv: ForgetVector | None = None,
    seed: int = 0,
) -> dict[str, UnlearnReport]:
    """Evaluate under each named shift applied to forget, retain and test sets."""
    suite = default_suite(seed) if suite is None else suite
    out = {}
    for name, pert in suite:
        if pert is not None and isinstance(pert, CorruptionSpec) and pert.kind == "elastic" and train.image_shape is None:
            raise InputError(f"{name}: elastic transform needs image-shaped data")
        shifted_train = shifted_split(model, train, split, pert, fv)
        shifted_test = shift_dataset(model, test, pert, fv, "test")
        out[name] = evaluate(model, shifted_train, shifted_test, split, fv=fv, method=name, seed=seed, detail=True)
    return out


SWEEP_SETS = ("forget", "retain", "test")
SWEEP_METRICS = ("accuracy", "mia_nonmember")


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def sweep_rows(trials: Sequence[dict[str, UnlearnReport]]) -> list[dict]:
    """Long-format ``perturbation,set,metric,mean,std`` rows over trials.

    Per set: ``accuracy`` and ``mia_nonmember``, the share of rows the
    trial's MIA predictor calls non-member. UA is 100 minus forget accuracy,
    MIA-Efficacy is the forget non-member share.
    """
    if not trials:
        raise InputError("no trials to aggregate")
    rows = []
    for name in trials[0]:
        for set_name in SWEEP_SETS:
            for metric in SWEEP_METRICS:
                mean, std = _mean_std([t[name].extra["sets"][set_name][metric] for t in trials])
                rows.append({"perturbation": name, "set": set_name, "metric": metric, "mean": mean, "std": std})
    return rows


def summary_rows(trials: Sequence[dict[str, UnlearnReport]]) -> list[dict]:
    """One row per perturbation with mean/std of UA, MIA-Efficacy, RA, TA."""
    rows = []
    for name in trials[0]:
        row = {"perturbation": name}
        for metric in METRICS:
            row[f"{metric}_mean"], row[f"{metric}_std"] = _mean_std([getattr(t[name], metric) for t in trials])
        rows.append(row)
    return rows


def transfer_eval(
    fv: ForgetVector,
    model: MLP,
    variant: str,
    train: LabeledDataset,
    test: LabeledDataset,
    split: ForgetSplit,
    sigma: float | None = None,
    seed: int = 0,
) -> float:
    """UA of ``fv`` on an unseen forget set built per ``variant``."""
    if variant == "test-class":
        if not isinstance(split.spec, ClassWise):
            raise ConfigError("test-class transfer needs a class-wise split")
        unseen = test.subset(np.flatnonzero(test.labels == split.spec.target))
        if len(unseen) == 0:
            raise EmptySetError("test set has no rows of the forgotten class")
    elif variant == "gn1-perturbed":
        spec = gn1(seed) if sigma is None else CorruptionSpec("gaussian", sigma=sigma, seed=seed)
        forget = split.forget(train)
        unseen = forget.with_features(corrupt(forget.features, spec, forget.image_shape))
    elif variant == "et1-perturbed":
        forget = split.forget(train)
        unseen = forget.with_features(corrupt(forget.features, et1(seed), forget.image_shape))
    else:
        raise ConfigError(f"unknown transfer variant {variant!r}")
    return compute_ua(model, unseen, fv)
