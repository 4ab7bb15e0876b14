"""Run configuration: INI files with one section per component.

Sections and their targets::

    [run]    seed, name
    [data]   kind = toy | scenes, path (optional), then the fields of
             SyntheticSpec or SceneSpec
    [model]  ModelConfig fields (m, t_minus and t_plus come from [data])
    [loss]   LossConfig fields
    [optim]  TrainConfig fields
    [eval]   EvalConfig fields

Unknown sections or keys are errors. ``CU_LAB_SEED`` in the environment
replaces ``[run] seed``; an explicit ``--seed`` beats both.
"""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .. import datagen
from ..errors import ConfigError
from ..nets import ModelConfig, config_hash
from ..objectives import LossConfig

SEED_ENV = "CU_LAB_SEED"
OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("constant", "cosine")
DATA_KINDS = ("toy", "scenes")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 1e-3
    lr_schedule: str = "constant"
    steps: int = 20000
    batch_size: int = 32
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1 or not self.grad_clip > 0:
            raise ConfigError("need lr >= 0, steps >= 0, batch_size >= 1, grad_clip > 0")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine" and self.steps > 0:
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))
        return self.lr


@dataclass
class EvalConfig:
    every: int = 2000             # validation cadence in steps; 0 = only at the end
    val_subset: int = 300         # validation instances scored for model selection
    val_kl_samples: int = 2000
    kl_samples: int = 10000       # per test instance
    test_subset: int = 0          # 0 = the whole split

    def __post_init__(self):
        if min(self.every, self.val_subset, self.test_subset) < 0:
            raise ConfigError("eval counts must be non-negative")
        if min(self.val_kl_samples, self.kl_samples) < 1000:
            raise ConfigError("KL estimates need at least 1000 samples")


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    data_kind: str = "toy"
    data_path: str | None = None
    data: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def data_spec(self):
        cls = datagen.SyntheticSpec if self.data_kind == "toy" else datagen.SceneSpec
        return cls(**{**self.data, "seed": self.data.get("seed", self.seed)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.data.items()}
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, model=replace(self.model, init_seed=seed))

    def override(self, section: str, key: str, value) -> "RunConfig":
        """Copy with one field changed; ``value`` may be a string as in a file."""
        if section == "run":
            if key not in ("name", "seed"):
                raise ConfigError(f"[run] unknown key {key!r}")
            parsed = _convert(key, value, getattr(self, key, None))
            return replace(self, **{key: parsed}) if key != "seed" else self.with_seed(int(parsed))
        if section == "data":
            spec_cls = datagen.SyntheticSpec if self.data_kind == "toy" else datagen.SceneSpec
            defaults = {f.name: f.default for f in fields(spec_cls)}
            if key not in defaults:
                raise ConfigError(f"[data] unknown key {key!r}")
            if key == "sigma_gt" and isinstance(value, str):
                raise ConfigError("[data] sigma_gt is drawn from the seed; pass a matrix through the Python API")
            return _apply_dims(replace(self, data={**self.data, key: _convert(key, value, defaults[key])}))
        target = {"model": "model", "loss": "loss", "optim": "train", "eval": "eval"}.get(section)
        if target is None:
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(self, target)
        if key not in {f.name for f in fields(obj)}:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        return replace(self, **{target: replace(obj, **{key: _convert(key, value, getattr(obj, key))})})


def _convert(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def _apply_dims(cfg: RunConfig) -> RunConfig:
    spec = cfg.data_spec()
    if cfg.data_kind == "toy":
        m, tm, tp = spec.m, spec.timestamps, spec.timestamps
    else:
        m, tm, tp = spec.m, spec.t_minus, spec.t_plus
    return replace(cfg, model=replace(cfg.model, m=m, t_minus=tm, t_plus=tp))


def parse_config(text: str, source: str = "<string>", seed: int | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = {"run", "data", "model", "loss", "optim", "eval"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"{source}: unknown sections {sorted(extra)}")

    cfg = RunConfig()
    if parser.has_section("data"):
        kind = parser["data"].get("kind", "toy").strip()
        if kind not in DATA_KINDS:
            raise ConfigError(f"{source}: [data] kind must be one of {DATA_KINDS}")
        cfg = replace(cfg, data_kind=kind, data_path=parser["data"].get("path"))
    for section in parser.sections():
        for key, value in parser[section].items():
            if section == "data" and key in ("kind", "path"):
                continue
            if section == "model" and key in ("m", "t_minus", "t_plus", "init_seed"):
                raise ConfigError(f"{source}: [model] {key} is derived from [data] / [run]")
            cfg = cfg.override(section, key, value)

    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg = cfg.with_seed(int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    cfg = cfg.with_seed(seed if seed is not None else cfg.seed)
    return _apply_dims(cfg)


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("cu_lab.presets").iterdir() if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    path = resources.files("cu_lab.presets") / f"{name}.ini"
    if not path.is_file():
        raise ConfigError(f"no preset {name!r}; available: {', '.join(preset_names())}")
    return path.read_text()


def load_config(path_or_preset: str | os.PathLike, seed: int | None = None) -> RunConfig:
    """Read a config file, or a packaged preset when no such file exists."""
    p = Path(path_or_preset)
    if p.is_file():
        return parse_config(p.read_text(), str(p), seed)
    if p.suffix or os.sep in str(path_or_preset):
        raise ConfigError(f"config file not found: {p}")
    return parse_config(preset_text(str(path_or_preset)), f"preset:{path_or_preset}", seed)
