"""Small ReLU softmax classifier with hand-written backprop.

Everything runs in float64. Weights of layer ``i`` have shape
``(dims[i + 1], dims[i])`` and a forward step is ``a @ W.T + b``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._rng import rng_for


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MLP:
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ShapeError("need at least input and output widths")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("one weight/bias pair per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]):
                raise ShapeError(f"layer {i}: weight shape {w.shape} does not compose")
            if b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape}")
            w.setflags(write=False)
            b.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MLP":
        ws = tuple(np.array(p, dtype=np.float64) for p in params[0::2])
        bs = tuple(np.array(p, dtype=np.float64) for p in params[1::2])
        return replace(self, weights=ws, biases=bs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.epochs < 0:
            raise ConfigError("epochs and weight_decay must be nonnegative")


@dataclass(frozen=True)
class LossSpec:
    """Scalar loss over a batch of inputs.

    ``composite`` treats the first ``n_forget`` rows as forget samples scored
    with the margin loss and the remaining rows as retain samples scored with
    ``lambda1`` times cross-entropy.
    """

    kind: str = "ce"
    tau: float = 1.0
    lambda1: float = 1.0
    n_forget: int = 0

    def __post_init__(self):
        if self.kind not in ("ce", "margin", "composite"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")


def init_mlp(layer_dims: Sequence[int], seed: int = 0) -> MLP:
    """He-normal weights, zero biases, drawn from the seed's init stream."""
    dims = tuple(int(d) for d in layer_dims)
    if any(d < 1 for d in dims):
        raise ShapeError("layer widths must be positive")
    rng = rng_for(seed, "init")
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        ws.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        bs.append(np.zeros(fan_out))
    return MLP(dims, tuple(ws), tuple(bs), seed=int(seed))


def param_count(model: MLP) -> int:
    d = model.layer_dims
    return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))


def checksum(model: MLP) -> str:
    h = hashlib.sha256()
    h.update(repr(model.layer_dims).encode())
    for p in model.params():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def quantize_f32(model: MLP) -> MLP:
    """Round parameters to single precision (the on-disk precision)."""
    return model.with_params([p.astype(np.float32).astype(np.float64) for p in model.params()])


def _check_input(model: MLP, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected (n, {model.input_dim}) input, got {x.shape}")
    return x


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    return y.astype(np.int64)


def _forward(model: MLP, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    acts = [x]
    pre = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        if i != last:
            acts.append(a)
    return a, acts, pre


def forward_logits(model: MLP, x) -> np.ndarray:
    return _forward(model, _check_input(model, x))[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_ce(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    if len(y) == 0:
        raise InputError("empty batch")
    return float(-_log_softmax(logits)[np.arange(len(y)), y].mean())


def _ce_dlogits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    return g / len(y)


def _runner_up(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    masked = logits.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return masked.argmax(axis=1)


def margin_values(logits, labels) -> np.ndarray:
    """Per-row ``f_y - max_{k != y} f_k``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[1] < 2:
        raise ConfigError("margin needs at least two classes")
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    rows = np.arange(len(y))
    return logits[rows, y] - logits[rows, _runner_up(logits, y)]


def margin_from_logits(logits, labels, tau: float) -> float:
    m = margin_values(logits, labels)
    if len(m) == 0:
        raise InputError("empty batch")
    return float(np.maximum(m, -tau).mean())


def _margin_dlogits(logits: np.ndarray, y: np.ndarray, tau: float) -> np.ndarray:
    rows = np.arange(len(y))
    k = _runner_up(logits, y)
    active = (logits[rows, y] - logits[rows, k]) > -tau
    g = np.zeros_like(logits)
    g[rows, y] = active
    g[rows, k] -= active
    return g / len(y)


def _loss_and_dlogits(logits: np.ndarray, y: np.ndarray, spec: LossSpec) -> tuple[float, np.ndarray]:
    if spec.kind == "ce":
        return softmax_ce(logits, y), _ce_dlogits(logits, y)
    if spec.kind == "margin":
        if logits.shape[1] < 2:
            raise ConfigError("margin needs at least two classes")
        return margin_from_logits(logits, y, spec.tau), _margin_dlogits(logits, y, spec.tau)
    nf = spec.n_forget
    if not 0 < nf <= len(y):
        raise InputError("composite loss needs at least one forget row")
    g = np.zeros_like(logits)
    loss = margin_from_logits(logits[:nf], y[:nf], spec.tau)
    g[:nf] = _margin_dlogits(logits[:nf], y[:nf], spec.tau)
    if nf < len(y) and spec.lambda1 != 0:
        loss += spec.lambda1 * softmax_ce(logits[nf:], y[nf:])
        g[nf:] = spec.lambda1 * _ce_dlogits(logits[nf:], y[nf:])
    elif spec.lambda1 > 0:
        raise InputError("retain rows required when lambda1 > 0")
    return loss, g


def _backward(model: MLP, acts, pre, dlogits: np.ndarray, want_params: bool):
    grads: list[np.ndarray] = []
    dz = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        if want_params:
            grads.append(dz.sum(axis=0))
            grads.append(dz.T @ acts[i])
        da = dz @ model.weights[i]
        if i > 0:
            dz = da * (pre[i - 1] > 0)
    grads.reverse()
    return grads, da


def loss_and_input_gradient(model: MLP, x, labels, spec: LossSpec) -> tuple[float, np.ndarray]:
    x = _check_input(model, x)
    y = _check_labels(labels, x.shape[0], model.n_classes)
    logits, acts, pre = _forward(model, x)
    loss, dlogits = _loss_and_dlogits(logits, y, spec)
    _, dx = _backward(model, acts, pre, dlogits, want_params=False)
    return loss, dx


def input_gradient(model: MLP, x, labels, spec: LossSpec) -> np.ndarray:
    return loss_and_input_gradient(model, x, labels, spec)[1]


def loss_and_param_gradients(model: MLP, x, labels, spec: LossSpec | None = None) -> tuple[float, list[np.ndarray]]:
    """Loss plus gradients ordered like ``model.params()``."""
    x = _check_input(model, x)
    y = _check_labels(labels, x.shape[0], model.n_classes)
    logits, acts, pre = _forward(model, x)
    loss, dlogits = _loss_and_dlogits(logits, y, spec or LossSpec("ce"))
    grads, _ = _backward(model, acts, pre, dlogits, want_params=True)
    return loss, grads


def predict(model: MLP, x) -> np.ndarray:
    # argmax returns the first maximum, i.e. lowest class index on ties
    return forward_logits(model, x).argmax(axis=1)


@dataclass
class _Momentum:
    lr: float
    momentum: float
    weight_decay: float = 0.0
    buf: list[np.ndarray] | None = field(default=None)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], sign: float = 1.0) -> list[np.ndarray]:
        if self.buf is None:
            self.buf = [np.zeros_like(p) for p in params]
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            g = sign * g + self.weight_decay * p
            self.buf[i] = self.momentum * self.buf[i] + g
            out.append(p - self.lr * self.buf[i])
        return out


def sgd(
    model: MLP,
    x,
    labels,
    *,
    epochs: int,
    learning_rate: float,
    momentum: float,
    batch_size: int,
    weight_decay: float = 0.0,
    seed: int = 0,
    stream: str = "train",
    ascent: bool = False,
    history: list[float] | None = None,
) -> MLP:
    """Mini-batch SGD with momentum on cross-entropy; returns a new model.

    ``ascent`` flips the sign of the data gradient (weight decay is untouched).
    When ``history`` is given, the full-data loss is appended before each epoch
    and once at the end.
    """
    x = _check_input(model, x)
    y = _check_labels(labels, x.shape[0], model.n_classes)
    if len(y) == 0:
        raise InputError("cannot train on empty data")
    rng = rng_for(seed, stream)
    opt = _Momentum(learning_rate, momentum, weight_decay)
    params = [p.copy() for p in model.params()]
    current = model
    sign = -1.0 if ascent else 1.0
    for _ in range(epochs):
        if history is not None:
            history.append(softmax_ce(forward_logits(current, x), y))
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            _, grads = loss_and_param_gradients(current, x[idx], y[idx])
            params = opt.step(params, grads, sign)
            current = model.with_params(params)
    if history is not None:
        history.append(softmax_ce(forward_logits(current, x), y))
    return current


def train_classifier(x, labels, layer_dims: Sequence[int], cfg: TrainConfig) -> MLP:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("cannot train on empty data")
    model = init_mlp(layer_dims, cfg.seed)
    return sgd(
        model, x, labels,
        epochs=cfg.epochs, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        batch_size=cfg.batch_size, weight_decay=cfg.weight_decay, seed=cfg.seed,
    )
