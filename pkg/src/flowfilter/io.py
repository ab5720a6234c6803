"""Binary file formats: datasets, sample sets and checkpoints.

Every file is ``magic (8 bytes) | version (uint32 LE) | header length
(uint64 LE) | JSON header | little-endian float64 payload``.  Checkpoints
append a SHA-256 digest of all preceding bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterStore
from .systems import Dataset
from .training import InitialBeliefParams, ModelConfig, TrainConfig, TrainedFilter, build_model

DATASET_MAGIC = b"FBFDATA\x00"
SAMPLES_MAGIC = b"FBFSAMP\x00"
CHECKPOINT_MAGIC = b"FBFCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


def _pack(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.ascontiguousarray(payload, dtype=_F64).tobytes()
    return _PREFIX.pack(magic, FORMAT_VERSION, len(head)) + head + body


def _unpack(raw: bytes, magic: bytes) -> tuple[dict, np.ndarray, int]:
    if len(raw) < _PREFIX.size:
        raise FormatError("file too short")
    got, version, hlen = _PREFIX.unpack_from(raw)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"corrupt header: {err}") from None
    return header, raw, start + hlen


def _write(path, data: bytes) -> None:
    Path(path).write_bytes(data)


# --------------------------------------------------------------------------
# datasets


def dataset_bytes(ds: Dataset) -> bytes:
    header = {
        "kind": "dataset", "system": ds.system, "params": ds.params, "seed": ds.seed,
        "N": ds.N, "K": ds.K, "m": ds.m, "n": ds.n, "format_version": FORMAT_VERSION,
    }
    per_traj = [np.concatenate([ds.states[i].ravel(), ds.measurements[i].ravel()]) for i in range(ds.N)]
    return _pack(DATASET_MAGIC, header, np.concatenate(per_traj) if per_traj else np.zeros(0))


def save_dataset(ds: Dataset, path) -> int:
    data = dataset_bytes(ds)
    _write(path, data)
    return len(data)


def load_dataset(path) -> Dataset:
    header, raw, off = _unpack(Path(path).read_bytes(), DATASET_MAGIC)
    N, K, m, n = (int(header[k]) for k in ("N", "K", "m", "n"))
    per = (K + 1) * m + K * n
    payload = np.frombuffer(raw, dtype=_F64, offset=off)
    if payload.size != N * per:
        raise FormatError(f"payload has {payload.size} floats, expected {N * per}")
    rows = payload.reshape(N, per).astype(np.float64)
    states = rows[:, : (K + 1) * m].reshape(N, K + 1, m)
    meas = rows[:, (K + 1) * m:].reshape(N, K, n)
    return Dataset(states, meas, header["system"], header["params"], int(header["seed"]))


# --------------------------------------------------------------------------
# sample sets (filter / particle-filter output)


def save_samples(samples: np.ndarray, path, meta: dict | None = None) -> int:
    """``samples`` is (n_traj, K, n_samples, m)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 4:
        raise ValueError("samples must be (n_traj, K, n_samples, m)")
    header = {"kind": "samples", "shape": list(samples.shape), "meta": meta or {}, "format_version": FORMAT_VERSION}
    data = _pack(SAMPLES_MAGIC, header, samples)
    _write(path, data)
    return len(data)


def load_samples(path) -> tuple[np.ndarray, dict]:
    header, raw, off = _unpack(Path(path).read_bytes(), SAMPLES_MAGIC)
    shape = tuple(int(s) for s in header["shape"])
    payload = np.frombuffer(raw, dtype=_F64, offset=off)
    if payload.size != int(np.prod(shape)):
        raise FormatError("sample payload size does not match header shape")
    return payload.reshape(shape).astype(np.float64), header.get("meta", {})


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: TrainedFilter) -> bytes:
    manifest = [[name, list(t.shape)] for name, t in model.store.items()]
    n_iter = len(model.history) if model.saved_history_length is None else model.saved_history_length
    header = {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "config": model.metadata(),
        "manifest": manifest,
        "mu0": model.mu0.tolist(),
        "Sigma0": model.Sigma0.tolist(),
        "history_length": n_iter,
    }
    flat = [t.data.ravel() for _, t in model.store.items()]
    payload = np.concatenate(flat) if flat else np.zeros(0)
    body = _pack(CHECKPOINT_MAGIC, header, payload)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: TrainedFilter, path) -> int:
    data = checkpoint_bytes(model)
    _write(path, data)
    return len(data)


def load_checkpoint(path) -> TrainedFilter:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise FormatError("checkpoint too short")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint checksum mismatch")
    header, _, off = _unpack(body, CHECKPOINT_MAGIC)
    cfg = header["config"]
    model_cfg = ModelConfig(**cfg["model"])
    train_cfg = TrainConfig(**cfg["train"])
    model = build_model(model_cfg, np.random.default_rng(0))
    names = [name for name, _ in header["manifest"]]
    if any(name.startswith("init.") for name in names):
        InitialBeliefParams(model.store, model_cfg.state_dim)
    if names != list(model.store):
        raise FormatError("parameter manifest does not match the configured architecture")
    payload = np.frombuffer(body, dtype=_F64, offset=off)
    state = {}
    pos = 0
    for name, shape in header["manifest"]:
        size = int(np.prod(shape)) if shape else 1
        state[name] = payload[pos:pos + size].reshape(shape)
        pos += size
    if pos != payload.size:
        raise FormatError("checkpoint payload length mismatch")
    model.store.load_state(state)
    model.train_config = train_cfg
    model.mu0 = np.asarray(header["mu0"], dtype=np.float64)
    model.Sigma0 = np.asarray(header["Sigma0"], dtype=np.float64)
    model.saved_history_length = int(header.get("history_length", 0))
    return model


def store_fingerprint(store: ParameterStore) -> str:
    h = hashlib.sha256()
    for name, t in store.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype=_F64).tobytes())
    return h.hexdigest()
