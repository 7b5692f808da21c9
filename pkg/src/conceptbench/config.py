"""Experiment configuration: YAML loading, validation and defaults.

Unknown keys are rejected; parse errors report line and column, validation
errors the dotted field path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .datasets import DATASET_IDS, RESOLUTIONS
from .models.gaussian import AVERAGING
from .models.cbm import REGIMES
from .tasks import TASK_NAMES, all_setups

EXPERIMENTS = ("data_efficiency", "concept_task_dependence", "variance_fragility")
METHODS = ("cbm", "cme", "vae", "wvae")
ALLOWED_METHODS = {
    "data_efficiency": ("cbm", "wvae", "vae"),
    "concept_task_dependence": ("cme", "cbm"),
    "variance_fragility": ("cbm", "wvae", "vae"),
}
DEFAULT_METHODS = {
    "data_efficiency": ["cbm", "wvae"],
    "concept_task_dependence": ["cme", "cbm"],
    "variance_fragility": ["cbm", "wvae"],
}
DEFAULT_FRACTIONS = [0.01, 0.05, 0.1, 0.2, 0.4, 1.0]
DEFAULT_SCALE = 10_000


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    steps: Optional[int] = None
    optimizer: str = "adaptive_moment"
    eval_every: Optional[int] = None


@dataclass
class ModelSettings:
    channels: list = field(default_factory=lambda: [32, 32, 64, 64])
    hidden: int = 256
    latent_dim: int = 10
    beta: float = 1.0
    averaging: str = "product_of_experts"
    symmetric_kl: bool = True
    pair_k: int = 1
    regime: str = "joint"
    lam: float = 1.0
    label_hidden: list = field(default_factory=lambda: [64])


@dataclass
class ProbeSettings:
    max_depth: int = 4
    n_estimators: int = 100
    learning_rate: float = 0.1
    layer_id: str = "dense"
    n_labelled: int = 1000


@dataclass
class ExperimentConfig:
    experiment: str
    dataset: str = "dsprites"
    methods: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    setups: list = field(default_factory=list)
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    labelled_count: int = 500
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    resolution: int = 64
    scale: int = DEFAULT_SCALE
    split_seed: int = 1234
    holdout: float = 0.1
    train: TrainSettings = field(default_factory=TrainSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)

    def __post_init__(self):
        if not self.methods and self.experiment in DEFAULT_METHODS:
            self.methods = list(DEFAULT_METHODS[self.experiment])
        if not self.tasks and self.experiment == "concept_task_dependence":
            self.tasks = list(TASK_NAMES)
        if not self.setups and self.experiment == "variance_fragility":
            self.setups = ["high_spatial", "low_spatial"]
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})


_SECTIONS = {"train": TrainSettings, "model": ModelSettings, "probe": ProbeSettings}


def _check(cond: bool, message: str, path: str) -> None:
    if not cond:
        raise ConfigError(message, path)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: ExperimentConfig) -> None:
    _check(cfg.experiment in EXPERIMENTS, f"must be one of {EXPERIMENTS}", "experiment")
    _check(cfg.dataset in DATASET_IDS, f"must be one of {DATASET_IDS}", "dataset")
    _check(isinstance(cfg.methods, list) and cfg.methods, "must be a non-empty list", "methods")
    for i, m in enumerate(cfg.methods):
        _check(m in ALLOWED_METHODS[cfg.experiment],
               f"{m!r} not valid for {cfg.experiment}; choose from {ALLOWED_METHODS[cfg.experiment]}",
               f"methods[{i}]")
    _check(isinstance(cfg.fractions, list) and cfg.fractions, "must be a non-empty list", "fractions")
    for i, p in enumerate(cfg.fractions):
        _check(_is_num(p) and 0 < p <= 1, f"fraction {p!r} outside (0, 1]", f"fractions[{i}]")
    _check(cfg.fractions == sorted(set(cfg.fractions)), "must be strictly increasing", "fractions")
    _check(isinstance(cfg.seeds, list) and len(cfg.seeds) >= 1, "need at least one seed", "seeds")
    for i, s in enumerate(cfg.seeds):
        _check(_is_int(s) and s >= 0, "seeds must be non-negative integers", f"seeds[{i}]")
    _check(_is_int(cfg.labelled_count) and cfg.labelled_count >= 2, "must be an integer >= 2", "labelled_count")
    _check(cfg.resolution in RESOLUTIONS, f"must be one of {RESOLUTIONS}", "resolution")
    _check(_is_int(cfg.scale) and cfg.scale >= 100, "must be an integer >= 100", "scale")
    _check(_is_int(cfg.split_seed), "must be an integer", "split_seed")
    _check(_is_num(cfg.holdout) and 0 < cfg.holdout < 1, "must lie in (0, 1)", "holdout")
    for i, t in enumerate(cfg.tasks):
        _check(t in TASK_NAMES, f"unknown task; choose from {TASK_NAMES}", f"tasks[{i}]")
    known = all_setups()
    for i, s in enumerate(cfg.setups):
        _check(s in known, f"unknown setup; choose from {sorted(known)}", f"setups[{i}]")

    t = cfg.train
    _check(_is_num(t.lr) and t.lr >= 0, "must be >= 0", "train.lr")
    _check(_is_int(t.batch_size) and t.batch_size > 0, "must be a positive integer", "train.batch_size")
    _check(_is_int(t.epochs) and t.epochs > 0, "must be a positive integer", "train.epochs")
    _check(t.steps is None or (_is_int(t.steps) and t.steps > 0), "must be a positive integer", "train.steps")
    _check(t.optimizer in ("adaptive_moment", "adam", "sgd"), "must be adaptive_moment or sgd", "train.optimizer")
    _check(t.eval_every is None or (_is_int(t.eval_every) and t.eval_every > 0), "must be a positive integer",
           "train.eval_every")

    m = cfg.model
    _check(isinstance(m.channels, list) and all(_is_int(c) and c > 0 for c in m.channels),
           "must be a list of positive integers", "model.channels")
    _check(_is_int(m.hidden) and m.hidden > 0, "must be a positive integer", "model.hidden")
    _check(_is_int(m.latent_dim) and m.latent_dim > 0, "must be a positive integer", "model.latent_dim")
    _check(_is_num(m.beta) and m.beta >= 0, "must be >= 0", "model.beta")
    _check(m.averaging in AVERAGING, f"must be one of {AVERAGING}", "model.averaging")
    _check(isinstance(m.symmetric_kl, bool), "must be a boolean", "model.symmetric_kl")
    _check(_is_int(m.pair_k) and m.pair_k >= 1, "must be a positive integer", "model.pair_k")
    _check(m.regime in REGIMES, f"must be one of {REGIMES}", "model.regime")
    _check(_is_num(m.lam) and m.lam >= 0, "must be >= 0", "model.lam")
    _check(isinstance(m.label_hidden, list) and all(_is_int(c) and c > 0 for c in m.label_hidden),
           "must be a list of positive integers", "model.label_hidden")

    p = cfg.probe
    _check(_is_int(p.max_depth) and p.max_depth >= 1, "must be a positive integer", "probe.max_depth")
    _check(_is_int(p.n_estimators) and p.n_estimators >= 1, "must be a positive integer", "probe.n_estimators")
    _check(_is_num(p.learning_rate) and p.learning_rate > 0, "must be > 0", "probe.learning_rate")
    _check(isinstance(p.layer_id, str), "must be a layer name", "probe.layer_id")
    _check(_is_int(p.n_labelled) and p.n_labelled >= 2, "must be an integer >= 2", "probe.n_labelled")


def _section(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError("must be a mapping", path)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{path}.{unknown[0]}")
    return cls(**data)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", unknown[0])
    if "experiment" not in data:
        raise ConfigError("required field missing", "experiment")
    data = dict(data)
    for key, cls in _SECTIONS.items():
        value = data.get(key)
        if not isinstance(value, cls):
            data[key] = _section(cls, value, key)
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:  # pragma: no cover - guarded by the key checks above
        raise ConfigError(str(exc)) from exc


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"parse error{where}: {problem}") from exc
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    return loads_config(path.read_text(encoding="utf-8"))


def dumps_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dumps_config(cfg), encoding="utf-8")
    return path
