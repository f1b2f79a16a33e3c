"""Run configuration documents for the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import CANONICAL_BANDS, SplitSpec
from .errors import ConfigError, DataError
from .model import TriFormerConfig
from .sdt import SdtConfig
from .train import TrainConfig


@dataclass
class DataOptions:
    bands: int = CANONICAL_BANDS
    normalize: bool = True


@dataclass
class RunConfig:
    model: TriFormerConfig = field(default_factory=TriFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tune: TrainConfig = field(default_factory=lambda: TrainConfig(batch=12))
    sdt: SdtConfig = field(default_factory=SdtConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    data: DataOptions = field(default_factory=DataOptions)
    repeats: int = 1
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "tune": self.tune.to_dict(),
            "sdt": self.sdt.to_dict(),
            "split": {"n_per_class": self.split.n_per_class, "seed": self.split.seed,
                      "overrides": {str(k): v for k, v in self.split.overrides.items()}},
            "data": asdict(self.data),
            "repeats": self.repeats,
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls()
            if "model" in d:
                cfg.model = TriFormerConfig.from_dict(d["model"])
            for key in ("train", "tune"):
                if key in d:
                    _reject(d[key], TrainConfig, key)
                    setattr(cfg, key, TrainConfig(**{**getattr(cfg, key).to_dict(), **d[key]}))
            if "sdt" in d:
                cfg.sdt = SdtConfig.from_dict(d["sdt"])
            if "split" in d:
                _reject(d["split"], SplitSpec, "split")
                cfg.split = SplitSpec(**d["split"])
            if "data" in d:
                _reject(d["data"], DataOptions, "data")
                cfg.data = DataOptions(**d["data"])
            cfg.repeats = int(d.get("repeats", 1))
            cfg.paths = dict(d.get("paths", {}))
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from None
        if cfg.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        return cfg


def _reject(section, cls, name):
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(section) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e.strerror or e}") from None
    try:
        return RunConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
