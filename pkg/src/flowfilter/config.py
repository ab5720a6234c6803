"""Strict INI experiment configs and root-seed derivation.

Example::

    [run]
    seed = 0

    [system]
    id = sinusoidal
    q2 = 0.1
    r2 = 0.05
    K = 100
    n_train = 1000
    n_test = 200

    [model]
    variant = fbf
    flow_blocks = 6

    [training]
    epochs = 500

    [evaluation]
    n_samples = 1000

Unknown sections or keys raise :class:`ConfigError` before any work starts.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .training import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


SYSTEM_KEYS = {
    "sinusoidal": {"q2": float, "r2": float, "K": int},
    "lorenz96": {"m": int, "F": float, "dt": float, "K": int, "obs_var": float},
    "advdiff": {"kappa": float, "diff": float, "sigma": float, "r2": float, "n": int, "K": int, "dt": float},
}
SYSTEM_DEFAULTS = {
    "sinusoidal": {"q2": 0.1, "r2": 0.05, "K": 100},
    "lorenz96": {"m": 10, "F": 8.0, "dt": 0.01, "K": 500, "obs_var": 1.0},
    "advdiff": {"kappa": 0.5, "diff": 0.01, "sigma": 10.0, "r2": 0.1, "n": 10, "K": 200, "dt": 0.005},
}
METRICS = ("rmse", "mmd", "crps")
METHODS = ("fbf", "fbf_prime", "pf")


@dataclass
class SystemConfig:
    id: str = "sinusoidal"
    params: dict = field(default_factory=dict)
    n_train: int = 1000
    n_test: int = 200


@dataclass
class EvalConfig:
    metrics: tuple[str, ...] = METRICS
    n_samples: int = 1000
    pf_particles: int = 2000
    mmd_bandwidth: float = 2.0


@dataclass
class CompareConfig:
    methods: tuple[str, ...] = METHODS
    sweep_key: str | None = None
    sweep_values: tuple[float, ...] = ()


@dataclass
class ExperimentConfig:
    seed: int = 0
    system: SystemConfig = field(default_factory=SystemConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)


def derive_seed(root: int, label: str, index: int = 0) -> int:
    """Stream seed for a named component: SHA-256 of ``root:label:index``."""
    digest = hashlib.sha256(f"{root}:{label}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def _dataclass_section(section: str, items: dict, cls, fixed: dict | None = None):
    types = {f.name: f.type for f in fields(cls)}
    kinds = {"int": int, "float": float, "str": str, "bool": bool}
    values = dict(fixed or {})
    for key, raw in items.items():
        if key not in types or key in (fixed or {}):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        values[key] = _convert(section, key, raw, kinds[str(types[key])])
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{section}] {err}") from None


def _csv(raw: str) -> list[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    known = {"run", "system", "model", "training", "evaluation", "compare"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")

    cfg = ExperimentConfig()
    if cp.has_section("run"):
        run = dict(cp["run"])
        for key in run:
            if key != "seed":
                raise ConfigError(f"[run] unknown key {key!r}")
        if "seed" in run:
            cfg.seed = _convert("run", "seed", run["seed"], int)

    sysd = dict(cp["system"]) if cp.has_section("system") else {}
    sid = sysd.pop("id", "sinusoidal")
    if sid not in SYSTEM_KEYS:
        raise ConfigError(f"[system] unknown id {sid!r}")
    params = dict(SYSTEM_DEFAULTS[sid])
    sc = SystemConfig(id=sid)
    for key, raw in sysd.items():
        if key in ("n_train", "n_test"):
            setattr(sc, key, _convert("system", key, raw, int))
        elif key in SYSTEM_KEYS[sid]:
            params[key] = _convert("system", key, raw, SYSTEM_KEYS[sid][key])
        else:
            raise ConfigError(f"[system] unknown key {key!r} for system {sid}")
    if sc.n_train < 1 or sc.n_test < 1:
        raise ConfigError("[system] n_train and n_test must be >= 1")
    sc.params = params
    cfg.system = sc

    dims = system_dims(sid, params)
    model_items = dict(cp["model"]) if cp.has_section("model") else {}
    cfg.model = _dataclass_section("model", model_items, ModelConfig, {"state_dim": dims[0], "obs_dim": dims[1]})
    train_items = dict(cp["training"]) if cp.has_section("training") else {}
    train_items.setdefault("seed", str(derive_seed(cfg.seed, "train") % 2**32))
    cfg.training = _dataclass_section("training", train_items, TrainConfig)

    ev = dict(cp["evaluation"]) if cp.has_section("evaluation") else {}
    e = EvalConfig()
    for key, raw in ev.items():
        if key == "metrics":
            names = tuple(_csv(raw))
            bad = [n for n in names if n not in METRICS]
            if bad or not names:
                raise ConfigError(f"[evaluation] unknown metrics {bad}")
            e.metrics = names
        elif key in ("n_samples", "pf_particles"):
            setattr(e, key, _convert("evaluation", key, raw, int))
        elif key == "mmd_bandwidth":
            e.mmd_bandwidth = _convert("evaluation", key, raw, float)
        else:
            raise ConfigError(f"[evaluation] unknown key {key!r}")
    if e.n_samples < 1 or e.pf_particles < 2 or e.mmd_bandwidth <= 0:
        raise ConfigError("[evaluation] invalid sample counts or bandwidth")
    cfg.evaluation = e

    cmp_items = dict(cp["compare"]) if cp.has_section("compare") else {}
    c = CompareConfig()
    for key, raw in cmp_items.items():
        if key == "methods":
            names = tuple(_csv(raw))
            bad = [n for n in names if n not in METHODS]
            if bad or not names:
                raise ConfigError(f"[compare] unknown methods {bad}")
            c.methods = names
        elif key == "sweep":
            name, _, values = raw.partition(":")
            name = name.strip()
            if name not in SYSTEM_KEYS[sid] or name in ("K", "m", "n"):
                raise ConfigError(f"[compare] cannot sweep {name!r}")
            c.sweep_key = name
            c.sweep_values = tuple(_convert("compare", key, v, float) for v in _csv(values))
        else:
            raise ConfigError(f"[compare] unknown key {key!r}")
    cfg.compare = c
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text, str(path))


def system_dims(system: str, params: dict) -> tuple[int, int]:
    if system == "sinusoidal":
        return 2, 2
    if system == "lorenz96":
        return int(params["m"]), int(params["m"])
    if system == "advdiff":
        return 100, int(params["n"])
    raise ConfigError(f"unknown system {system!r}")
