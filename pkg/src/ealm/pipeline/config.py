"""Experiment configuration: one INI file with a section per stage."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..entity_lm import EntityConfig
from ..errors import ConfigError
from ..fusion import FusionConfig
from ..numerics.optim import LrSchedule
from ..pretrained_lm import PretrainedConfig
from ..textdata.synthetic import SyntheticConfig
from ..training import TrainConfig


@dataclass
class StageConfig:
    """Model hyper-parameters plus the optimisation settings of one training stage."""

    model: dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(1e-4, 3e-3, 1e-4, 2000, 20000))


def _default_stages() -> dict[str, StageConfig]:
    return {
        "pretrained": StageConfig({}, TrainConfig(epochs=3, batch_size=32, grad_accum=2),
                                  LrSchedule(1e-4, 3e-3, 1e-4, 2000, 20000)),
        "entity": StageConfig({}, TrainConfig(batch_size=64, grad_accum=1, steps=2500),
                              LrSchedule(1e-4, 3e-3, 1e-4, 2000, 40000)),
        "fusion": StageConfig({}, TrainConfig(epochs=8, batch_size=32, grad_accum=2),
                              LrSchedule(1e-4, 3e-3, 1e-4, 2000, 20000)),
    }


@dataclass
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    vocab_size: int = 640
    stages: dict[str, StageConfig] = field(default_factory=_default_stages)
    seeds: tuple[int, ...] = (0, 1)
    test_sets: tuple[str, ...] = ("general", "seen", "tail", "new", "tailnew")
    swap_entity_type: str = "song"
    swap_top_fraction: float = 0.05
    swap_budget: float = 0.02
    fractions: tuple[float, ...] = (0.25, 0.5, 1.0)
    on_unknown: str = "skip"
    # retraining for a hot swap continues from the deployed model unless disabled
    retrain_warm_start: bool = True
    retrain_steps: int = 1000
    retrain_lr_max: float = 1e-3

    def pretrained_config(self, vocab_size: int) -> PretrainedConfig:
        return PretrainedConfig(vocab_size=vocab_size, **self.stages["pretrained"].model)

    def entity_config(self, entity_type: str, vocab_size: int) -> EntityConfig:
        return EntityConfig(entity_type=entity_type, vocab_size=vocab_size, **self.stages["entity"].model)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(**self.stages["fusion"].model)

    def validate(self) -> None:
        self.data.validate()
        if self.swap_entity_type not in self.data.entity_types:
            raise ConfigError(f"swap entity type {self.swap_entity_type!r} is not a configured entity type")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("catalogue fractions must lie in (0, 1]")
        if self.retrain_steps < 1:
            raise ConfigError("retrain_steps must be positive")
        if self.retrain_lr_max <= 0:
            raise ConfigError("retrain_lr_max must be positive")
        if self.on_unknown not in ("skip", "error"):
            raise ConfigError("on_unknown must be 'skip' or 'error'")
        # building the model configs validates their field names
        self.pretrained_config(self.vocab_size)
        self.entity_config(self.data.entity_types[0], self.vocab_size).validate()
        self.fusion_config()


_MODEL_FIELDS = {
    "pretrained": {f.name: f for f in dataclasses.fields(PretrainedConfig) if f.name != "vocab_size"},
    "entity": {f.name: f for f in dataclasses.fields(EntityConfig) if f.name not in ("vocab_size", "entity_type")},
    "fusion": {f.name: f for f in dataclasses.fields(FusionConfig)},
}
_SCHEDULE_KEYS = {"lr_start", "lr_max", "lr_end", "warmup_tokens", "decay_interval_tokens", "decay_factor"}


def _coerce(value: str, like: Any, key: str):
    try:
        if isinstance(like, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(like, tuple):
            inner = like[0] if like else ""
            return tuple(_coerce(v.strip(), inner, key) for v in value.split(",") if v.strip())
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None


def _defaults_for(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def parse_config(text: str) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from INI text; unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config: {e}") from None
    cfg = ExperimentConfig()
    known = {"experiment", "data", "pretrained", "entity", "fusion"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")

    if cp.has_section("data"):
        defaults = _defaults_for(SyntheticConfig)
        kw = {}
        for key, value in cp.items("data"):
            if key == "vocab_size":
                cfg.vocab_size = _coerce(value, 0, "data.vocab_size")
                continue
            if key not in defaults:
                raise ConfigError(f"unknown key data.{key}")
            kw[key] = _coerce(value, defaults[key], f"data.{key}")
        cfg.data = SyntheticConfig(**kw)

    if cp.has_section("experiment"):
        defaults = _defaults_for(ExperimentConfig)
        for key, value in cp.items("experiment"):
            if key not in defaults or key in ("data", "stages", "vocab_size"):
                raise ConfigError(f"unknown key experiment.{key}")
            setattr(cfg, key, _coerce(value, defaults[key], f"experiment.{key}"))

    train_defaults = _defaults_for(TrainConfig)
    for stage, fields in _MODEL_FIELDS.items():
        if not cp.has_section(stage):
            continue
        sc = cfg.stages[stage]
        sched = dataclasses.asdict(sc.schedule)
        train = dataclasses.asdict(sc.train)
        for key, value in cp.items(stage):
            name = f"{stage}.{key}"
            if key in fields:
                f = fields[key]
                like = f.default if f.default is not dataclasses.MISSING else ""
                sc.model[key] = _coerce(value, like, name)
            elif key in _SCHEDULE_KEYS:
                sched[key] = _coerce(value, sched[key], name)
            elif key in train_defaults:
                train[key] = _coerce(value, train_defaults[key], name)
            else:
                raise ConfigError(f"unknown key {name}")
        sc.schedule = LrSchedule(**sched)
        sc.train = TrainConfig(**train)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))
