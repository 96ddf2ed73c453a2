"""Experiment configuration read from a TOML file.

Every key has a default, so an empty file describes the full experiment grid
(all five architectures, both feature kinds, plain and Siamese, h in 10/20/50)
on synthetic data.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .features import FeatureKind
from .models import Architecture, EncoderSpec, SiameseHeadConfig
from .synth import SynthConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    heads: int = 4
    mlp_hidden: tuple[int, int] = (500, 250)
    tick_mlp_hidden: int = 128
    siamese_hidden: int = 32
    alpha: float = 2.0
    beta: float = 1.0

    def encoder_spec(self, arch: Architecture, seq_len: int) -> EncoderSpec:
        return EncoderSpec(arch, seq_len=seq_len, hidden=self.hidden, heads=self.heads,
                           mlp_hidden=tuple(self.mlp_hidden), tick_mlp_hidden=self.tick_mlp_hidden)

    def head_config(self) -> SiameseHeadConfig:
        return SiameseHeadConfig(self.siamese_hidden, self.alpha, self.beta)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data_dir: str = ""
    instruments: tuple[str, ...] = ("SYN0",)
    delta: int = 49
    horizons: tuple[int, ...] = (10, 20, 50)
    features: tuple[str, ...] = ("LOB", "OFI")
    architectures: tuple[str, ...] = tuple(a.value for a in Architecture)
    siamese: tuple[bool, ...] = (False, True)
    max_splits: int = 0  # 0 keeps every rolling window
    stride: int = 1  # keep every stride-th anchor per day
    scale_ofi: bool = False
    workers: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=100))

    def __post_init__(self):
        if not self.instruments:
            raise ConfigError("at least one instrument is required")
        if not self.architectures or not self.features or not self.siamese or not self.horizons:
            raise ConfigError("architectures, features, siamese and horizons must be non-empty")
        if any(h < 1 for h in self.horizons):
            raise ConfigError("horizons must be positive")
        if self.delta < 0 or self.stride < 1 or self.workers < 1 or self.max_splits < 0:
            raise ConfigError("delta >= 0, stride >= 1, workers >= 1, max_splits >= 0 required")
        for a in self.architectures:
            Architecture.parse(a)
        for f in self.features:
            FeatureKind.parse(f)

    @property
    def arch_list(self) -> list[Architecture]:
        return [Architecture.parse(a) for a in self.architectures]

    @property
    def feature_list(self) -> list[FeatureKind]:
        return [FeatureKind.parse(f) for f in self.features]

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


_SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig}


def _build(cls, raw: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build(cls, raw.pop(name, {}) or {}, f"[{name}]")
    if "siamese" in raw:
        raw["siamese"] = [bool(s) for s in raw["siamese"]]
    top = _build(ExperimentConfig, raw, "top level")
    return replace(top, **sections)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)
