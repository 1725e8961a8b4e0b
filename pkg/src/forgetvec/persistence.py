"""Checkpoint and vector files, JSON/CSV writers.

Binary artifacts are one JSON header line followed by a little-endian float32
payload. The header carries ``sha256`` of the payload, verified on load.
Every write goes through a temp file and ``os.replace``; an existing file is
never changed (rewriting identical bytes is a no-op, anything else fails).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .forget_vector import ForgetVector
from .nn import MLP

SCHEMA_VERSION = 1


class ChecksumError(OSError):
    pass


class ArtifactExistsError(OSError):
    pass


def write_once(path, data: bytes) -> Path:
    path = Path(path)
    if path.exists():
        if path.read_bytes() == data:
            return path
        raise ArtifactExistsError(f"{path} exists with different content; refusing to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")


def write_json(path, obj) -> Path:
    return write_once(path, json_bytes(obj))


def csv_bytes(rows: list[dict], columns: list[str]) -> bytes:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in columns})
    return buf.getvalue().encode("utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 6))
    return v


def write_csv(path, rows: list[dict], columns: list[str]) -> Path:
    return write_once(path, csv_bytes(rows, columns))


def _artifact_bytes(header: dict, payload: np.ndarray) -> bytes:
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    header = {**header, "schema_version": SCHEMA_VERSION, "count": int(payload.size), "sha256": hashlib.sha256(body).hexdigest()}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n" + body


def _read_artifact(path, kind: str) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ChecksumError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: unreadable header") from exc
    if header.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} file, found {header.get('kind')!r}")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {header.get('schema_version')}")
    body = raw[nl + 1:]
    if len(body) != 4 * header["count"]:
        raise ChecksumError(f"{path}: payload has {len(body)} bytes, header declares {header['count']} floats")
    if hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return header, np.frombuffer(body, dtype="<f4").astype(np.float64)


def model_bytes(model: MLP) -> bytes:
    flat = np.concatenate([p.ravel() for p in model.params()])
    header = {"kind": "model", "layer_dims": list(model.layer_dims), "activation": model.activation, "seed": model.seed}
    return _artifact_bytes(header, flat)


def save_model(path, model: MLP) -> Path:
    return write_once(path, model_bytes(model))


def load_model(path) -> MLP:
    header, flat = _read_artifact(path, "model")
    dims = tuple(header["layer_dims"])
    params, pos = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        params.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        params.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    ws = tuple(np.array(p) for p in params[0::2])
    bs = tuple(np.array(p) for p in params[1::2])
    return MLP(dims, ws, bs, seed=int(header["seed"]), activation=header["activation"])


def vector_bytes(fv: ForgetVector, seed: int, fingerprint: str | None = None) -> bytes:
    header = {
        "kind": "forget_vector",
        "shape": [fv.dim],
        "seed": int(seed),
        "provenance": fv.provenance,
        "weights": None if fv.weights is None else [float(w) for w in fv.weights],
        "config": fv.config,
        "model_fingerprint": fingerprint,
    }
    return _artifact_bytes(header, fv.delta)


def save_vector(path, fv: ForgetVector, seed: int, fingerprint: str | None = None) -> Path:
    return write_once(path, vector_bytes(fv, seed, fingerprint))


def load_vector(path) -> tuple[ForgetVector, dict]:
    header, flat = _read_artifact(path, "forget_vector")
    if list(flat.shape) != header["shape"]:
        raise ChecksumError(f"{path}: shape mismatch")
    weights = None if header.get("weights") is None else np.asarray(header["weights"])
    return ForgetVector(flat, header.get("provenance", "direct"), weights, header.get("config") or {}), header


def quantize_vector(fv: ForgetVector) -> ForgetVector:
    """Round to the on-disk precision so saved and in-memory vectors agree."""
    return ForgetVector(fv.delta.astype(np.float32).astype(np.float64), fv.provenance, fv.weights, fv.config)
