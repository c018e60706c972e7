"""Architecture, schedule and run configuration."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration values or unknown keys."""


@dataclass(frozen=True)
class IViTConfig:
    """Hyperparameters of the instance transformer.

    ``head_dim`` defaults to ``D // heads``; the attention width is
    ``heads * head_dim`` and is projected back to ``D`` after the heads are
    concatenated, so head counts that do not divide ``D`` (12 heads at
    D=128) remain usable.
    """

    P: int = 64
    N: int = 500
    D: int = 128
    heads: int = 12
    layers: int = 12
    grid_w: int = 100
    grid_h: int = 100
    n_grades: int = 3
    n_classes: int = 2
    mlp_ratio: int = 4
    channels: int = 3
    grid_factor: int = 20
    head_dim: int | None = None
    n_features: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("P", "N", "D", "heads", "layers", "grid_w", "grid_h", "n_grades",
                     "n_classes", "mlp_ratio", "channels", "grid_factor", "n_features"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.D % 2:
            raise ConfigError(f"D must be even to split position halves, got {self.D}")
        if self.P % 4 or self.P < 8:
            raise ConfigError(f"P must be a multiple of 4 and at least 8, got {self.P}")
        if self.heads > self.D:
            raise ConfigError(f"heads ({self.heads}) cannot exceed D ({self.D})")
        if self.head_dim is not None and self.head_dim < 1:
            raise ConfigError(f"head_dim must be positive, got {self.head_dim}")

    @property
    def dim_head(self) -> int:
        return self.head_dim if self.head_dim is not None else self.D // self.heads

    @property
    def attn_dim(self) -> int:
        return self.heads * self.dim_head

    @property
    def cls_pos_x(self) -> int:
        return self.grid_w

    @property
    def pad_pos_x(self) -> int:
        return self.grid_w + 1

    @property
    def cls_pos_y(self) -> int:
        return self.grid_h

    @property
    def pad_pos_y(self) -> int:
        return self.grid_h + 1

    @property
    def cls_grade(self) -> int:
        return self.n_grades

    @property
    def pad_grade(self) -> int:
        return self.n_grades + 1

    def replace(self, **changes) -> IViTConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> IViTConfig:
        return _build(cls, data, "model")

    @classmethod
    def for_roi(cls, roi_size: int, grid_factor: int = 20, **kw) -> IViTConfig:
        g = math.ceil(roi_size / grid_factor)
        return cls(grid_w=g, grid_h=g, grid_factor=grid_factor, **kw)


# Fig. 3 encoder scales: name -> (layers, heads); all at D=128.
ENCODER_SCALES: dict[str, tuple[int, int]] = {
    "T-6-6": (6, 6),
    "M-12-12": (12, 12),
    "H-24-12": (24, 12),
}


def scale_config(base: IViTConfig, scale: str) -> IViTConfig:
    if scale not in ENCODER_SCALES:
        raise ConfigError(f"unknown encoder scale {scale!r}; expected one of {list(ENCODER_SCALES)}")
    layers, heads = ENCODER_SCALES[scale]
    return base.replace(layers=layers, heads=heads, D=128, head_dim=None)


@dataclass(frozen=True)
class Schedule:
    epochs: int = 50
    base_lr: float = 1e-3
    warmup: int = 10
    decay_epoch: int = 30
    decay_lr: float = 1e-4
    batch_size: int = 4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.warmup < 0 or self.decay_epoch < 0:
            raise ConfigError("warmup and decay_epoch must be non-negative")
        if self.base_lr < 0 or self.decay_lr < 0:
            raise ConfigError("learning rates must be non-negative")


# i-ViT-H: 2 heads, 1 layer, hidden 32; lr 1e-2 falling to 1e-3.
IVIT_H_MODEL = {"D": 32, "heads": 2, "layers": 1}
IVIT_H_SCHEDULE = {"base_lr": 1e-2, "decay_lr": 1e-3}


@dataclass(frozen=True)
class SweepConfig:
    P: tuple[int, ...] = (16, 32, 64)
    N: tuple[int, ...] = (250, 500, 750, 1000, 1250, 1500)
    scales: tuple[str, ...] = ("T-6-6", "M-12-12", "H-24-12")

    def __post_init__(self):
        object.__setattr__(self, "P", tuple(int(p) for p in self.P))
        object.__setattr__(self, "N", tuple(int(n) for n in self.N))
        object.__setattr__(self, "scales", tuple(self.scales))
        for s in self.scales:
            if s not in ENCODER_SCALES:
                raise ConfigError(f"unknown encoder scale {s!r}")


@dataclass(frozen=True)
class Paths:
    manifest: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs, loaded from one JSON document."""

    model: IViTConfig = field(default_factory=IViTConfig)
    synth: dict[str, Any] = field(default_factory=dict)
    schedule: Schedule = field(default_factory=Schedule)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    paths: Paths = field(default_factory=Paths)
    roi_size: int = 2000
    seed: int = 0
    dt_max_depth: int | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any], profile: str = "paper") -> RunConfig:
        from .synthetic import SynthParams

        base = profile_dict(profile)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
        for key, value in data.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key].update(value)
            else:
                merged[key] = value
        roi_size = int(merged.get("roi_size", 2000))
        synth = dict(merged.get("synth", {}))
        synth.setdefault("roi_size", roi_size)
        SynthParams.from_dict(synth)  # validation only
        model = dict(merged.get("model", {}))
        gf = int(model.get("grid_factor", 20))
        model.setdefault("grid_w", math.ceil(roi_size / gf))
        model.setdefault("grid_h", math.ceil(roi_size / gf))
        return cls(
            model=IViTConfig.from_dict(model),
            synth=synth,
            schedule=_build(Schedule, merged.get("schedule", {}), "schedule"),
            sweep=_build(SweepConfig, merged.get("sweep", {}), "sweep"),
            paths=_build(Paths, merged.get("paths", {}), "paths"),
            roi_size=roi_size,
            seed=int(merged.get("seed", 0)),
            dt_max_depth=merged.get("dt_max_depth"),
        )

    @classmethod
    def load(cls, path: str | Path | None, profile: str = "paper") -> RunConfig:
        data = {} if path is None else json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data, profile)


PROFILES: dict[str, dict[str, Any]] = {
    "paper": {
        "model": {"P": 64, "N": 500, "D": 128, "heads": 12, "layers": 12},
        "schedule": {"epochs": 50, "base_lr": 1e-3, "warmup": 10, "decay_epoch": 30,
                     "decay_lr": 1e-4},
        "roi_size": 2000,
    },
    "desk": {
        "model": {"P": 32, "N": 64, "D": 32, "heads": 4, "layers": 2},
        "schedule": {"epochs": 30, "base_lr": 1e-3, "warmup": 5, "decay_epoch": 20,
                     "decay_lr": 1e-4},
        "sweep": {"N": [16, 32, 64]},
        "roi_size": 400,
    },
}


def profile_dict(profile: str) -> dict[str, Any]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {list(PROFILES)}")
    return json.loads(json.dumps(PROFILES[profile]))


def _build(cls, data: dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {section!r} config: {exc}") from exc
