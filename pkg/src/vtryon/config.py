"""Flat ``key = value`` configuration.

Every key belongs to exactly one of the dataclasses below; the key's type is
taken from the dataclass annotation. Lines starting with ``#`` are comments.
Tuples are written comma separated (``enc_widths = 16,32,64``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    height: int = 64
    width: int = 48
    pose_sigma: float = 2.0
    # CIHP ids: 5 upper-clothes, 14 left-arm, 15 right-arm / 2 hair, 10 neck, 13 face
    clothes_arms: tuple[int, ...] = (5, 14, 15)
    face_neck_hair: tuple[int, ...] = (2, 10, 13)


@dataclass(frozen=True)
class ArchConfig:
    height: int = 64
    width: int = 48
    n_levels: int = 3
    enc_widths: tuple[int, ...] = (16, 32, 64)
    fit_widths: tuple[int, ...] = (16, 32, 64)
    roi_widths: tuple[int, ...] = (16, 32, 64)
    flow_prior_sigma: float = 3.0
    kv_width: int = 64
    key_channels: int = 8
    value_channels: int = 32
    disc_width: int = 16
    match_width: int = 16
    n_scales: int = 2
    perceptual: str = "random"


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.01
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 0.1
    gamma4: float = 0.1
    gamma5: float = 1.0
    beta1: float = 0.1
    beta2: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v != float("inf")):
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_stage1: int = 8
    batch_stage2: int = 2
    frames_per_sample: int = 5
    skip_increment: int = 5
    skip_epoch_period: int = 20
    epochs: int = 1
    iters_per_epoch: int = 10
    stage1_iterations: int = 200
    stage2_iterations: int = 200
    checkpoint_every: int = 100
    paired_per_unpaired: int = 1
    unpaired: bool = True
    memory_cap: int = 0
    flow_radius: int = 3
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        for name in ("batch_stage1", "batch_stage2", "frames_per_sample", "skip_increment",
                     "skip_epoch_period", "iters_per_epoch", "paired_per_unpaired"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("learning_rate", "adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")


_SECTIONS = {"data": DataConfig, "arch": ArchConfig, "weights": LossWeights, "train": TrainConfig}


def _key_table():
    table = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            # height/width are shared by data and arch; both get set
            table.setdefault(f.name, []).append((section, hints[f.name]))
    return table


def _parse_value(key, raw, tp):
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def replace(self, **values) -> "Config":
        table = _key_table()
        parts = {name: {} for name in _SECTIONS}
        for key, value in values.items():
            if key not in table:
                raise ConfigError(f"unknown config key: {key}")
            for section, tp in table[key]:
                if isinstance(value, str) and tp is not str:
                    value = _parse_value(key, value, tp)
                parts[section][key] = value
        return Config(**{name: dataclasses.replace(getattr(self, name), **kw)
                         for name, kw in parts.items()})

    def with_overrides(self, overrides) -> "Config":
        values = {}
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        return self.replace(**values)

    def to_text(self) -> str:
        lines = []
        seen = set()
        for name in _SECTIONS:
            lines.append(f"# {name}")
            for f in dataclasses.fields(getattr(self, name)):
                if f.name in seen:
                    continue
                seen.add(f.name)
                lines.append(f"{f.name} = {_format_value(getattr(getattr(self, name), f.name))}")
        return "\n".join(lines) + "\n"

    def flat(self) -> dict:
        out = {}
        for name in _SECTIONS:
            out.update(dataclasses.asdict(getattr(self, name)))
        return out


def load_config(path=None, overrides=None) -> Config:
    cfg = Config()
    if path is not None:
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        cfg = cfg.replace(**values)
    return cfg.with_overrides(overrides)


def arch_digest(arch: ArchConfig) -> str:
    blob = json.dumps(dataclasses.asdict(arch), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
