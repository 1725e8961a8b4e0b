"""Config-driven pipelines behind the command line.

One JSON config fully determines one experiment; see ``README.md`` for the
schema. All artifacts land in an output directory and are write-once.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines
from ._rng import derive_seed
from .composition import ClassVectorBank, compose, grid_axis, grid_sweep_2d, optimize_weights, weight_config
from .datasets import (
    ClassWise,
    ForgetSplit,
    LabeledDataset,
    RandomSubset,
    load_csv,
    make_blobs,
    make_patterns,
    split_forget_retain,
    spec_to_dict,
    train_test_split,
)
from .evaluation import METRICS, default_suite, evaluate, robustness_sweep, summary_rows, sweep_rows
from .forget_vector import ForgetVector, ForgetVectorConfig, optimize_forget_vector
from .nn import MLP, ConfigError, InputError, TrainConfig, checksum, predict, quantize_f32, train_classifier
from .persistence import load_model, load_vector, quantize_vector, save_model, save_vector, write_csv, write_json, write_once

CONFIG_SCHEMA_VERSION = 1
OUT_ENV = "FORGETVEC_OUT"

DEFAULT_DATASET = {
    "kind": "blobs", "classes": 5, "dim": 16, "per_class": 500,
    "center_scale": 3.0, "sigma": 0.3, "as_image": False, "test_fraction": 0.2,
}
DEFAULT_HIDDEN = [64]
TOP_LEVEL_KEYS = {
    "schema_version", "seed", "dataset", "arch", "train", "split", "method",
    "checkpoint", "compose", "sweep", "output_dir",
}
FV_KEYS = {"tau", "lambda1", "lambda2", "lr0", "momentum", "decay", "batch_size", "max_iterations"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    hidden: tuple[int, ...] = tuple(DEFAULT_HIDDEN)
    train: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: {"kind": "class", "target": 0})
    method: dict = field(default_factory=lambda: {"name": "forget_vector"})
    checkpoint: str | None = None
    compose: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    output_dir: str | None = None
    base_dir: str = "."

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed})

    def split_spec(self):
        kind = self.split.get("kind")
        if kind == "class":
            return ClassWise(int(self.split["target"]))
        if kind == "random":
            classes = self.split.get("classes")
            return RandomSubset(
                float(self.split.get("ratio", 0.1)),
                int(self.split.get("seed", self.seed)),
                None if classes is None else tuple(int(c) for c in classes),
            )
        raise ConfigError(f"split.kind must be 'class' or 'random', got {kind!r}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def parse_config(raw: dict, seed_override: int | None = None, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    seed = int(raw.get("seed", 0) if seed_override is None else seed_override)
    raw_dataset = raw.get("dataset", {})
    dataset = {**DEFAULT_DATASET, **raw_dataset} if raw_dataset.get("kind", "blobs") == "blobs" else dict(raw_dataset)
    train = dict(raw.get("train", {}))
    bad = set(train) - {"epochs", "learning_rate", "momentum", "batch_size", "weight_decay"}
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    cfg = ExperimentConfig(
        seed=seed,
        dataset=dataset,
        hidden=tuple(int(h) for h in raw.get("arch", {}).get("hidden", DEFAULT_HIDDEN)),
        train=train,
        split=dict(raw.get("split", {"kind": "class", "target": 0})),
        method=dict(raw.get("method", {"name": "forget_vector"})),
        checkpoint=raw.get("checkpoint"),
        compose=dict(raw.get("compose", {})),
        sweep=dict(raw.get("sweep", {})),
        output_dir=raw.get("output_dir"),
        base_dir=base_dir,
    )
    cfg.train_config()
    cfg.split_spec()
    if cfg.method.get("name") not in ("forget_vector",) + baselines.METHODS:
        raise ConfigError(f"unknown method {cfg.method.get('name')!r}")
    if cfg.checkpoint is not None and not cfg.resolve(cfg.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {cfg.checkpoint} does not exist")
    return cfg


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw, seed_override, str(path.parent))


# --------------------------------------------------------------------- building blocks


def build_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = dict(cfg.dataset)
    kind = d.pop("kind", "blobs")
    test_fraction = float(d.pop("test_fraction", 0.2))
    if kind == "blobs":
        full = make_blobs(seed=cfg.seed, **d)
    elif kind == "patterns":
        full = make_patterns(seed=cfg.seed, **d)
    elif kind == "csv":
        shape = d.get("image_shape")
        train = load_csv(cfg.resolve(d["train"]), d.get("class_count"), shape)
        test = load_csv(cfg.resolve(d["test"]), train.class_count, shape)
        return train, test
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return train_test_split(full, test_fraction, cfg.seed)


def layer_dims(cfg: ExperimentConfig, data: LabeledDataset) -> list[int]:
    return [data.dim, *cfg.hidden, data.class_count]


def _sha(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.hexdigest()


def dataset_hash(data: LabeledDataset) -> str:
    return _sha(np.ascontiguousarray(data.features, "<f8").tobytes(), np.ascontiguousarray(data.labels, "<i8").tobytes())


def split_hash(split: ForgetSplit) -> str:
    return _sha(np.ascontiguousarray(split.forget_indices, "<i8").tobytes())


def retrain_key(cfg: ExperimentConfig, data: LabeledDataset, split: ForgetSplit) -> str:
    tc = json.dumps({"train": asdict(cfg.train_config()), "dims": layer_dims(cfg, data)}, sort_keys=True).encode()
    return _sha(dataset_hash(data).encode(), split_hash(split).encode(), tc)[:16]


def retrain_reference(cfg: ExperimentConfig, data: LabeledDataset, split: ForgetSplit, out: Path) -> MLP:
    """Retrained model for ``split``, cached under ``out/cache``."""
    path = out / "cache" / f"retrain-{retrain_key(cfg, data, split)}.ckpt"
    if path.exists():
        return load_model(path)
    model = quantize_f32(baselines.retrain(data, split, layer_dims(cfg, data), cfg.train_config()))
    save_model(path, model)
    return model


def load_base_model(cfg: ExperimentConfig, out: Path) -> MLP:
    path = cfg.resolve(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    if not path.exists():
        raise InputError(f"base checkpoint {path} not found; run `forgetvec train` first")
    return load_model(path)


def fv_config(cfg: ExperimentConfig, split: ForgetSplit, **overrides) -> ForgetVectorConfig:
    method = {k: v for k, v in cfg.method.items() if k in FV_KEYS}
    return ForgetVectorConfig.for_split(split, **{**method, "seed": cfg.seed, **overrides})


def fit_vector(model: MLP, cfg: ExperimentConfig, train: LabeledDataset, split: ForgetSplit, **overrides) -> ForgetVector:
    fv, _ = optimize_forget_vector(model, train, split, fv_config(cfg, split, **overrides))
    return quantize_vector(fv)


# --------------------------------------------------------------------- pipelines


def run_train(cfg: ExperimentConfig, out: Path) -> Path:
    train, test = build_datasets(cfg)
    model = quantize_f32(train_classifier(train.features, train.labels, layer_dims(cfg, train), cfg.train_config()))
    ckpt = save_model(out / "model.ckpt", model)
    metrics = {
        "seed": cfg.seed,
        "layer_dims": list(model.layer_dims),
        "train_accuracy": round(100.0 * float(np.mean(predict(model, train.features) == train.labels)), 2),
        "test_accuracy": round(100.0 * float(np.mean(predict(model, test.features) == test.labels)), 2),
        "dataset_sha256": dataset_hash(train),
        "model_sha256": checksum(model),
    }
    write_json(out / "train_metrics.json", metrics)
    return ckpt


def _report_name(method: str) -> str:
    return f"report-{method}.json"


def run_unlearn(cfg: ExperimentConfig, out: Path, timing: bool = False) -> Path:
    model = load_base_model(cfg, out)
    train, test = build_datasets(cfg)
    split = split_forget_retain(train, cfg.split_spec())
    ref_model = retrain_reference(cfg, train, split, out)
    ref = evaluate(ref_model, train, test, split, method="retrain", seed=cfg.seed)
    name = cfg.method["name"]
    start = time.perf_counter()
    if name == "forget_vector":
        fv = fit_vector(model, cfg, train, split)
        runtime = time.perf_counter() - start
        save_vector(out / "forget_vector.vec", fv, cfg.seed, checksum(model))
        report = evaluate(model, train, test, split, fv=fv, retrain_ref=ref, method=name, seed=cfg.seed, runtime_seconds=runtime)
    elif name == "retrain":
        runtime = time.perf_counter() - start
        report = ref.against(ref)
    else:
        mcfg = {k: v for k, v in cfg.method.items() if k != "name"}
        um = baselines.run_method(model, train, split, baselines.UnlearnMethodConfig(method=name, seed=cfg.seed, **mcfg))
        runtime = time.perf_counter() - start
        report = evaluate(um, train, test, split, retrain_ref=ref, method=name, seed=cfg.seed, runtime_seconds=runtime)
    report = replace(report, extra={"split": spec_to_dict(split.spec)})
    return write_json(out / _report_name(name), report.to_dict(include_runtime=timing))


def load_bank(cfg: ExperimentConfig, model: MLP, train: LabeledDataset, out: Path) -> ClassVectorBank:
    """Class-wise vectors, cached per model fingerprint under ``out/bank``."""
    fp = checksum(model)
    vectors = []
    for k in range(train.class_count):
        path = out / "bank" / f"class-{k}-{fp[:12]}.vec"
        if path.exists():
            fv, header = load_vector(path)
            if header.get("model_fingerprint") != fp:
                raise ValueError(f"{path} was built for another model")
        else:
            split = split_forget_retain(train, ClassWise(k))
            fv = fit_vector(model, cfg, train, split, lambda1=3.0)
            save_vector(path, fv, cfg.seed, fp)
        vectors.append(fv)
    return ClassVectorBank(tuple(vectors), fp)


def run_compose(cfg: ExperimentConfig, out: Path) -> list[Path]:
    model = load_base_model(cfg, out)
    train, test = build_datasets(cfg)
    bank = load_bank(cfg, model, train, out)
    mode = cfg.compose.get("mode", "optimize")
    split = split_forget_retain(train, cfg.split_spec())
    ref_model = retrain_reference(cfg, train, split, out)
    written = []
    if mode == "grid":
        classes = tuple(cfg.compose.get("classes") or (split.spec.classes if isinstance(split.spec, RandomSubset) else ()))
        if len(classes) != 2:
            raise ConfigError("grid mode needs two classes")
        g = cfg.compose.get("grid", {})
        axis = grid_axis(g.get("low", -0.2), g.get("high", 0.2), g.get("step", 0.05))
        ref = evaluate(ref_model, train, test, split, seed=cfg.seed)
        sweep = grid_sweep_2d(model, bank, classes, train, split, ref.ua, ref.ra, axis)
        written.append(write_csv(out / "grid.csv", sweep.rows(), ["w_a", "w_b", "ua_gap", "ra_gap", "avg_gap"]))
        best = {"classes": list(classes), "w_a": sweep.best[0], "w_b": sweep.best[1], "avg_gap": float(sweep.avg_gap.min())}
        written.append(write_json(out / "grid_best.json", best))
        return written
    ref = evaluate(ref_model, train, test, split, method="retrain", seed=cfg.seed)
    if mode == "weights":
        w = np.asarray(cfg.compose["weights"], dtype=np.float64)
        fv = compose(bank, w, model)
        runtime, trainable = None, None
        tag = "compose-weights"
    elif mode == "optimize":
        overrides = {k: v for k, v in cfg.compose.items() if k in FV_KEYS}
        start = time.perf_counter()
        w, fv, _ = optimize_weights(model, bank, train, split, weight_config(seed=cfg.seed, **overrides))
        runtime, trainable = time.perf_counter() - start, len(bank)
        tag = "compose-optimize"
        written.append(save_vector(out / "composed.vec", quantize_vector(fv), cfg.seed, bank.fingerprint))
    else:
        raise ConfigError(f"unknown compose mode {mode!r}")
    report = evaluate(
        model, train, test, split, fv=fv, retrain_ref=ref, method=tag, seed=cfg.seed,
        runtime_seconds=runtime, trainable_params=trainable,
    )
    report = replace(report, extra={"weights": [round(float(v), 6) for v in w], "split": spec_to_dict(split.spec)})
    written.append(write_json(out / _report_name(tag), report.to_dict(include_runtime=False)))
    return written


SWEEP_COLUMNS = ["perturbation", "set", "metric", "mean", "std"]


def _frange(start: float, stop: float, step: float) -> list[float]:
    if step <= 0 or stop < start:
        raise ConfigError("empty sweep range")
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def _check_lambda(values: Sequence[float]) -> list[float]:
    values = [float(v) for v in values]
    if not values or any(not 0 <= v <= 10 for v in values):
        raise ConfigError("lambda grid values must lie in [0, 10]")
    return values


def run_sweep(cfg: ExperimentConfig, out: Path) -> list[Path]:
    model = load_base_model(cfg, out)
    train, test = build_datasets(cfg)
    split = split_forget_retain(train, cfg.split_spec())
    ref_model = retrain_reference(cfg, train, split, out)
    ref = evaluate(ref_model, train, test, split, method="retrain", seed=cfg.seed)
    written = []
    if "robustness" in cfg.sweep:
        rc = cfg.sweep["robustness"]
        trials = int(rc.get("trials", 1))
        names = rc.get("suite", ["Benign", "GN1", "GN2", "ET1", "ET2", "PGD"])
        subjects = rc.get("subjects", ["origin", "retrain", "forget_vector"])
        fv = fit_vector(model, cfg, train, split) if "forget_vector" in subjects else None
        for subject in subjects:
            m, v = {"origin": (model, None), "retrain": (ref_model, None), "forget_vector": (model, fv)}[subject]
            runs = []
            for t in range(trials):
                ts = derive_seed(cfg.seed, "trial", t)
                suite = dict(default_suite(ts))
                runs.append(robustness_sweep(m, train, test, split, [(n, suite[n]) for n in names], fv=v, seed=ts))
            written.append(write_csv(out / f"robustness-{subject}.csv", sweep_rows(runs), SWEEP_COLUMNS))
            summary = summary_rows(runs)
            written.append(write_csv(out / f"robustness-{subject}-summary.csv", summary, list(summary[0])))
    if "tau" in cfg.sweep:
        tc = cfg.sweep["tau"]
        rows = []
        for tau in _frange(tc.get("start", 0.0), tc.get("stop", 2.2), tc.get("step", 0.2)):
            fv = fit_vector(model, cfg, train, split, tau=tau)
            r = evaluate(model, train, test, split, fv=fv, retrain_ref=ref, seed=cfg.seed)
            rows.append({"tau": tau, **r.metrics(), "avg_gap": r.avg_gap})
        written.append(write_csv(out / "tau_sweep.csv", rows, ["tau", *METRICS, "avg_gap"]))
    if "lambda" in cfg.sweep:
        lc = cfg.sweep["lambda"]
        rows = []
        for lr0 in [float(v) for v in lc.get("lr0", [0.1])]:
            for l1 in _check_lambda(lc.get("lambda1", [1, 2, 3, 4, 5])):
                for l2 in _check_lambda(lc.get("lambda2", [0, 1, 2, 3, 4])):
                    fv = fit_vector(model, cfg, train, split, lambda1=l1, lambda2=l2, lr0=lr0)
                    r = evaluate(model, train, test, split, fv=fv, retrain_ref=ref, seed=cfg.seed)
                    avg_perf = float(np.mean([r.ua, r.mia_efficacy, r.ra, r.ta]))
                    rows.append({"lr0": lr0, "lambda1": l1, "lambda2": l2, **r.metrics(), "avg_perf": avg_perf, "avg_gap": r.avg_gap})
        cols = ["lr0", "lambda1", "lambda2", *METRICS, "avg_perf", "avg_gap"]
        written.append(write_csv(out / "lambda_sweep.csv", rows, cols))
    if not written:
        raise ConfigError("sweep config selects nothing (use robustness, tau and/or lambda)")
    return written


REPORT_FIELDS = [*METRICS, "avg_gap"]


def aggregate_reports(reports: Sequence[dict], ddof: int = 1) -> list[dict]:
    """Mean and std per method; ``ddof=1`` is the sample std (0 for a single report)."""
    by_method: dict[str, list[dict]] = {}
    for r in reports:
        by_method.setdefault(r["method"], []).append(r)
    rows = []
    for method in sorted(by_method):
        group = by_method[method]
        row = {"method": method, "n": len(group)}
        for key in REPORT_FIELDS + [f"gap_{m}" for m in METRICS]:
            if key.startswith("gap_"):
                vals = [g["gaps"][key[4:]] for g in group if g.get("gaps")]
            else:
                vals = [g[key] for g in group if g.get(key) is not None]
            if not vals:
                row[f"{key}_mean"] = row[f"{key}_std"] = None
                continue
            arr = np.asarray(vals, dtype=np.float64)
            row[f"{key}_mean"] = float(arr.mean())
            row[f"{key}_std"] = float(arr.std(ddof=ddof)) if len(arr) > ddof else 0.0
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    headers = ["method", "n", *[k.upper() if k != "mia_efficacy" else "MIA" for k in REPORT_FIELDS]]
    lines = []
    for r in rows:
        cells = [r["method"], str(r["n"])]
        for k in REPORT_FIELDS:
            m, s = r[f"{k}_mean"], r[f"{k}_std"]
            cells.append("n/a" if m is None else f"{m:.2f}±{s:.2f}")
        lines.append(cells)
    widths = [max(len(h), *(len(c[i]) for c in lines)) for i, h in enumerate(headers)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(headers), *(fmt(c) for c in lines)]) + "\n"


def run_report(paths: Sequence[Path], out: Path, ddof: int = 1) -> tuple[list[Path], str]:
    if not paths:
        raise ConfigError("no report files given")
    reports = [json.loads(Path(p).read_text(encoding="utf-8")) for p in paths]
    rows = aggregate_reports(reports, ddof)
    columns = ["method", "n"] + [f"{k}_{s}" for k in REPORT_FIELDS + [f"gap_{m}" for m in METRICS] for s in ("mean", "std")]
    text = format_table(rows)
    written = [write_csv(out / "aggregate.csv", rows, columns), write_once(out / "aggregate.txt", text.encode("utf-8"))]
    return written, text
