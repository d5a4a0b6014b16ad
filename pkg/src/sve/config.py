"""TOML experiment configs with field-path validation.

A config has top-level ``experiment``, ``seeds`` and ``output_dir`` keys plus
``[model]``, ``[data]``, ``[pretrain]``, ``[train]``, ``[sweep]`` and
``[eval]`` sections. Every section is optional except where an experiment
needs it; unknown keys are rejected so typos surface as errors naming the
offending field (for example ``train.lr``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import CORRUPTIONS
from .errors import ConfigError

EXPERIMENTS = ("pretrain", "finetune", "eval", "ood", "shift_sweep", "members_ablation",
               "backbone_quality", "diversity")


@dataclass
class ModelSection:
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    d_model: int = 8
    n_heads: int = 2
    d_ff: int = 16
    seq_len: int = 4


@dataclass
class DataSection:
    kind: str = "synthetic"
    n_classes: int = 8
    dim: int = 32
    signal_dim: int = 4
    modes: int = 2
    radius: float = 1.0
    spread: float = 0.3
    geometry_seed: int = 7
    n_train_per_class: int = 250
    n_test_per_class: int = 250
    source_overlap: float = 0.5
    source_per_class: int = 1000
    ood_geometry_seed: int = 1007
    ood_radius: float = 1.0
    train_path: str = ""
    test_path: str = ""
    label: str = "label"


@dataclass
class PretrainSection:
    epochs: int = 30
    weak_epochs: int = 2
    lr: float = 3e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    checkpoint: str = ""  # "{seed}" is substituted


@dataclass
class TrainSection:
    method: str = "sve"
    epochs: int = 40
    iterations: int = 0
    batch_size: int = 32
    lr: float = 2e-2
    baseline_lr: float = 1e-3
    weight_decay: float = 0.05
    schedule: str = "cosine"
    warmup_fraction: float = 0.0
    grad_clip: float = 1.0
    n_members: int = 4
    sigma_init: float = 0.01
    shared_batches: bool = True


@dataclass
class SweepSection:
    methods: list = field(default_factory=lambda: ["single", "sve"])
    members: list = field(default_factory=lambda: [1, 2, 4, 8])
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    corruptions: list = field(default_factory=lambda: list(CORRUPTIONS))
    arms: list = field(default_factory=lambda: ["random", "weak", "strong"])
    top_k: int = 8


@dataclass
class EvalSection:
    checkpoint: str = ""  # "{seed}" is substituted


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list
    output_dir: str = "runs"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def as_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"model": ModelSection, "data": DataSection, "pretrain": PretrainSection,
             "train": TrainSection, "sweep": SweepSection, "eval": EvalSection}


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    return value


def _section(cls, table, path):
    if not isinstance(table, dict):
        raise ConfigError(path, "expected a table")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown field")
        setattr(obj, key, _coerce(value, getattr(obj, key), f"{path}.{key}"))
    return obj


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def validate(cfg):
    _require(cfg.experiment in EXPERIMENTS, "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    _require(len(cfg.seeds) > 0, "seeds", "must be non-empty")
    for i, s in enumerate(cfg.seeds):
        _require(isinstance(s, int) and not isinstance(s, bool) and s >= 0, f"seeds[{i}]",
                 "must be a non-negative integer")
    m = cfg.model
    _require(m.arch in ("mlp", "transformer"), "model.arch", "must be 'mlp' or 'transformer'")
    _require(m.activation in ("relu", "gelu_tanh"), "model.activation", "must be 'relu' or 'gelu_tanh'")
    _require(len(m.hidden) > 0 and all(isinstance(h, int) and h > 0 for h in m.hidden),
             "model.hidden", "must be a non-empty list of positive integers")
    if m.arch == "transformer":
        _require(m.d_model % m.n_heads == 0, "model.n_heads", "must divide model.d_model")
    d = cfg.data
    _require(d.kind in ("synthetic", "csv"), "data.kind", "must be 'synthetic' or 'csv'")
    if d.kind == "csv":
        _require(bool(d.train_path), "data.train_path", "required for csv data")
        _require(bool(d.test_path), "data.test_path", "required for csv data")
    _require(d.n_classes >= 2, "data.n_classes", "must be >= 2")
    _require(0 <= d.source_overlap <= 1, "data.source_overlap", "must lie in [0, 1]")
    _require(d.spread >= 0, "data.spread", "must be >= 0")
    if m.arch == "transformer" and d.kind == "synthetic":
        _require(d.dim == m.d_model * m.seq_len, "data.dim", "must equal model.d_model * model.seq_len")
    t = cfg.train
    _require(t.method in ("single", "svf", "sve", "mc_dropout", "deep_ensemble"), "train.method",
             "unknown method")
    _require(t.lr >= 0, "train.lr", "must be >= 0")
    _require(t.grad_clip > 0, "train.grad_clip", "must be > 0")
    _require(t.n_members >= 1, "train.n_members", "must be >= 1")
    _require(0 <= t.sigma_init < 1, "train.sigma_init", "must lie in [0, 1)")
    _require(t.schedule in ("cosine", "linear", "constant"), "train.schedule", "unknown schedule")
    _require(0 <= t.warmup_fraction < 1, "train.warmup_fraction", "must lie in [0, 1)")
    s = cfg.sweep
    for i, c in enumerate(s.corruptions):
        _require(c in CORRUPTIONS, f"sweep.corruptions[{i}]", f"unknown corruption {c!r}")
    for i, v in enumerate(s.severities):
        _require(isinstance(v, int) and 1 <= v <= 5, f"sweep.severities[{i}]", "must be in 1..5")
    for i, a in enumerate(s.arms):
        _require(a in ("random", "weak", "strong"), f"sweep.arms[{i}]", "must be random, weak or strong")
    for i, k in enumerate(s.members):
        _require(isinstance(k, int) and k >= 1, f"sweep.members[{i}]", "must be a positive integer")
    if cfg.experiment == "eval":
        _require(bool(cfg.eval.checkpoint), "eval.checkpoint", "required for the eval experiment")
    return cfg


def from_dict(raw):
    if "experiment" not in raw:
        raise ConfigError("experiment", "missing required field")
    if "seeds" not in raw:
        raise ConfigError("seeds", "missing required field")
    known = {"experiment", "seeds", "output_dir", *_SECTIONS}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown field")
    seeds = raw["seeds"]
    if not isinstance(seeds, list):
        raise ConfigError("seeds", "expected a list of integers")
    cfg = ExperimentConfig(experiment=str(raw["experiment"]).replace("-", "_"), seeds=list(seeds),
                           output_dir=str(raw.get("output_dir", "runs")))
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _section(cls, raw[name], name))
    return validate(cfg)


def load_config(path):
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("<file>", f"TOML parse error: {exc}") from None
    return from_dict(raw)
