"""Training configuration: flat ``key = value`` text files.

Blank lines and lines starting with ``#`` are ignored. Unknown keys are
errors. Recognised keys and defaults are the fields of :class:`TrainConfig`;
booleans accept true/false/1/0/yes/no.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .depthnet import DIVISOR
from .enhancer import ModelConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 128
    crop_mode: str = "resize"        # resize | crop
    batch_size: int = 8
    epochs: int = 100
    max_steps: int = 0               # > 0 overrides epochs
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    lambda_depth: float = 0.5
    lambda_recon: float = 1.0
    lambda_perc: float = 0.1
    lambda_ssim: float = 0.5
    lambda_color: float = 0.3
    lambda_edge: float = 0.2
    seed: int = 0
    depth_detach: bool = False
    extractor: str = "frozen-random"  # frozen-random | external
    extractor_seed: int = 0
    extractor_dir: str = ""
    checkpoint_every: int = 0
    depth_base: int = 64
    main_base: int = 32
    clusters: int = 8

    def __post_init__(self):
        if self.crop_size <= 0 or self.crop_size % DIVISOR:
            raise ConfigError(f"crop_size must be a positive multiple of {DIVISOR}")
        if self.crop_mode not in ("resize", "crop"):
            raise ConfigError("crop_mode must be 'resize' or 'crop'")
        if self.extractor not in ("frozen-random", "external"):
            raise ConfigError("extractor must be 'frozen-random' or 'external'")
        if self.extractor == "external" and not self.extractor_dir:
            raise ConfigError("extractor = external requires extractor_dir")
        for name in ("batch_size", "lr_max", "lr_min", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs <= 0 and self.max_steps <= 0:
            raise ConfigError("one of epochs or max_steps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(depth=self.lambda_depth, recon=self.lambda_recon, perc=self.lambda_perc,
                           ssim=self.lambda_ssim, color=self.lambda_color, edge=self.lambda_edge)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(depth_base=self.depth_base, main_base=self.main_base,
                           clusters=self.clusters, depth_detach=self.depth_detach)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def _coerce(raw: str, typ, key: str):
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, types[key], key)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
