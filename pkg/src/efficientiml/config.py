"""Configuration records and the flat ``key=value`` run-config format.

A run config is a plain text file with one ``key = value`` per line; ``#``
starts a comment. Keys are the dotted field names listed by
:func:`config_keys` (``model.channels``, ``train.lr_init``, ``loss.lambda_edge``,
``paths.data_root`` ...). Tuple values are comma separated.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# Per-stage (global, local, identity) channel fractions.
DEFAULT_SPLIT_RATIOS = ((0.8, 0.2, 0.0), (0.7, 0.2, 0.1), (0.6, 0.3, 0.1))
DEFAULT_CHANNELS = (200, 376, 448)
# Loss-weight table rows: (stage 1, stage 2, stage 3, fused output).
LOSS_WEIGHT_SETS = {
    "set1": (0.25, 0.35, 0.45, 1.0),
    "set2": (0.35, 0.35, 0.35, 1.0),
    "set3": (0.5, 0.5, 0.5, 0.5),
    "final": (0.15, 0.35, 0.55, 1.0),
}


@dataclass
class BackboneConfig:
    channels: tuple[int, int, int] = DEFAULT_CHANNELS
    depths: tuple[int, int, int] = (2, 2, 6)
    split_ratios: tuple[tuple[float, float, float], ...] = DEFAULT_SPLIT_RATIOS
    local_kernels: tuple[int, int, int] = (3, 5, 7)
    dw_kernel: int = 3
    ffn_ratio: int = 4
    stem_channels: tuple[int, int, int] = (8, 16, 32)
    embed_downsample: int = 16

    def validate(self) -> None:
        if len(self.channels) != 3 or len(self.depths) != 3:
            raise ConfigError("backbone needs exactly three stages")
        if not all(a < b for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channels must be strictly increasing, got {self.channels}")
        if any(d < 0 for d in self.depths):
            raise ConfigError(f"depths must be non-negative, got {self.depths}")
        if len(self.split_ratios) != 3:
            raise ConfigError("need one split ratio triple per stage")
        for r in self.split_ratios:
            if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9 or r[0] <= 0:
                raise ConfigError(f"split ratios must be non-negative, sum to 1, global > 0: {r}")
        for k in (*self.local_kernels, self.dw_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        if self.embed_downsample != 16:
            raise ConfigError("patch embedding downsamples by exactly 16")
        if len(self.stem_channels) != 3 or min(self.stem_channels) < 1:
            raise ConfigError("stem_channels needs three positive widths")
        if self.ffn_ratio < 1:
            raise ConfigError("ffn_ratio must be >= 1")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_width: int = 64
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        if self.head_width < 1:
            raise ConfigError("head_width must be positive")


@dataclass
class LossWeights:
    lambda_1: float = 0.15
    lambda_2: float = 0.35
    lambda_3: float = 0.55
    lambda_final: float = 1.0
    lambda_edge: float = 1.0
    edge_radius: int = 4

    @classmethod
    def from_set(cls, name: str, lambda_edge: float = 1.0) -> "LossWeights":
        a, b, c, d = LOSS_WEIGHT_SETS[name]
        return cls(a, b, c, d, lambda_edge)

    @property
    def per_scale(self) -> tuple[float, float, float]:
        return (self.lambda_1, self.lambda_2, self.lambda_3)

    def validate(self) -> None:
        vals = (*self.per_scale, self.lambda_final, self.lambda_edge)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ConfigError(f"loss weights must be >= 0 with at least one > 0: {vals}")
        if self.edge_radius < 1:
            raise ConfigError("edge_radius must be >= 1")


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 4
    steps: int = 200
    warmup_steps: int = 0
    seed: int = 0
    precision: str = "float32"
    grad_clip: float = 1.0
    eval_every: int = 50
    log_every: int = 1
    size: int = 256
    augment: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr_init < 0:
            raise ConfigError("lr_init must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError("warmup_steps must lie in [0, steps]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision}")
        if self.size % 64:
            raise ConfigError(f"size must be divisible by 64, got {self.size}")


@dataclass
class PathsConfig:
    data_root: str = ""
    out: str = "runs/default"
    checkpoint: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.loss.validate()
        return self


def _flat_fields(obj, prefix=""):
    for f in fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            # the backbone lives directly under ``model.``
            sub = prefix if f.name == "backbone" else f"{prefix}{f.name}."
            yield from _flat_fields(val, sub)
        else:
            yield f"{prefix}{f.name}", obj, f


def config_keys() -> list[str]:
    return [k for k, _, _ in _flat_fields(RunConfig())]


def _parse_value(text: str, current: Any, key: str):
    text = text.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(current, tuple):
            if current and isinstance(current[0], tuple):
                groups = [g for g in text.split(";") if g.strip()]
                return tuple(tuple(float(x) for x in g.split(",")) for g in groups)
            items = [x for x in text.split(",") if x.strip()]
            kind = type(current[0]) if current else float
            return tuple(kind(x) for x in items)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    slots = {k: (obj, f) for k, obj, f in _flat_fields(cfg)}
    for key, text in pairs.items():
        if key not in slots:
            raise ConfigError(f"unknown config key: {key}")
        obj, f = slots[key]
        setattr(obj, f.name, _parse_value(str(text), getattr(obj, f.name), key))
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        pairs[key.strip()] = val.strip()
    return pairs


# Named starting points; ``desk`` is a narrow model that overfits a handful of
# 256x256 images within a few minutes on one CPU core.
PRESETS: dict[str, dict[str, str]] = {
    "default": {},
    "desk": {
        "model.channels": "32,64,96",
        "model.depths": "1,1,2",
        "model.stem_channels": "8,16,32",
        "model.head_width": "32",
        "train.lr_init": "5e-3",
        "train.batch_size": "8",
        "train.steps": "200",
        "train.warmup_steps": "10",
        "train.eval_every": "50",
    },
}


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                preset: str = "default") -> RunConfig:
    """Preset, then the config file, then ``overrides``; later sources win."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = apply_overrides(RunConfig(), PRESETS[preset])
    if path:
        apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def _format_value(val) -> str:
    if isinstance(val, tuple):
        if val and isinstance(val[0], tuple):
            return "; ".join(",".join(repr(x) for x in g) for g in val)
        return ",".join(str(x) for x in val)
    return str(val).lower() if isinstance(val, bool) else str(val)


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved config, one ``key = value`` per line."""
    return "".join(f"{k} = {_format_value(getattr(o, f.name))}\n" for k, o, f in _flat_fields(cfg))
