"""Configuration: dataclasses, desk/full profiles, and the flat JSON
key-value format used by the CLI (dotted keys, e.g. "train.weights.lambda2").
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .masks import MaskThresholds


@dataclass(frozen=True)
class LevelSpec:
    """Disparity quantization grid: (d_min, d_max, n)."""

    d_min: float = 2.0
    d_max: float = 300.0
    n: int = 49


@dataclass(frozen=True)
class AugmentationConfig:
    resize_min: float = 0.75
    resize_max: float = 1.5
    crop_h: int = 192
    crop_w: int = 640
    hflip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05

    def __post_init__(self):
        if not (0 < self.resize_min <= self.resize_max):
            raise ConfigError("resize range must satisfy 0 < min <= max")
        if self.crop_h < 16 or self.crop_w < 16:
            raise ConfigError("crop smaller than 16x16")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 12
    lr: float = 1e-4
    lr_halve_epochs: tuple = (30, 40)
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    thresholds: MaskThresholds = field(default_factory=MaskThresholds)
    levels: LevelSpec = field(default_factory=LevelSpec)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "conv4"
    stage_channels: tuple = (32, 64, 128, 256)
    decoder_widths: tuple = (64, 64, 128)
    restore_channels: tuple = (32, 32)
    offset_hidden: int = 32


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    train_split: str = "train"
    test_split: str = "test"


@dataclass(frozen=True)
class GenConfig:
    """Synthetic dataset generation driven by the gen-data subcommand."""

    num_train: int = 200
    num_test: int = 40
    height: int = 96
    width: int = 320
    num_layers: int = 3
    disp_min: float = 2.0
    disp_max: float = 30.0
    baseline_m: float = 0.1
    focal_fx_px: float = 960.0
    seed: int = 1234


@dataclass(frozen=True)
class RunConfig:
    device: str = "cpu"
    log_every: int = 1
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = final only
    num_threads: int = 0  # 0 = leave torch's default


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    run: RunConfig = field(default_factory=RunConfig)


def full_profile() -> Config:
    """Full-scale training profile (the published hyperparameters)."""
    return Config()


def desk_profile() -> Config:
    """Small CPU-friendly profile used by the synthetic-data harness and CI.

    Distillation weights are raised relative to the full profile because the
    distilled head only receives a few hundred updates at this scale.
    """
    return Config(
        train=TrainConfig(
            epochs=14,
            batch_size=4,
            lr=2e-4,
            lr_halve_epochs=(8, 11),
            weights=LossWeights(
                lambda1=0.0008, lambda2=1.0, lambda3=0.01,
                beta=0.01, gamma=2.0, sd_start_epoch=7,
            ),
            thresholds=MaskThresholds(),
            levels=LevelSpec(d_min=2.0, d_max=40.0, n=17),
            aug=AugmentationConfig(
                resize_min=1.0, resize_max=1.3, crop_h=96, crop_w=320,
                hflip_prob=0.5,
            ),
            seed=42,
        ),
        model=ModelConfig(),
        gen=GenConfig(),
    )


PROFILES = {"desk": desk_profile, "full": full_profile}


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, prefix=f"{key}."))
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def to_flat(config: Config) -> dict:
    return _flatten(config)


def _coerce(key: str, value, template):
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(template, int) and not isinstance(template, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
    if isinstance(template, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected number, got {value!r}")
    if isinstance(template, tuple):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"{key}: expected JSON list, got {value!r}")
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return tuple(value)
    if isinstance(template, str):
        return str(value)
    return value


def from_flat(flat: dict, base: Config | None = None) -> Config:
    """Build a Config from flat dotted keys, starting from ``base`` (desk
    profile by default). Unknown keys raise ConfigError."""
    cfg = base if base is not None else desk_profile()
    defaults = to_flat(cfg)
    merged = dict(defaults)
    for key, value in flat.items():
        if key == "profile":
            continue
        if key not in defaults:
            raise ConfigError(f"unknown config key: {key}")
        merged[key] = _coerce(key, value, cfg_template_value(cfg, key))
    return _build(merged)


def cfg_template_value(cfg: Config, key: str):
    obj = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        obj = getattr(obj, part)
    value = getattr(obj, parts[-1])
    return tuple(value) if isinstance(value, list) else value


def _build(merged: dict) -> Config:
    def section(prefix):
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in merged.items() if k.startswith(prefix + ".")}

    def take(d, prefix):
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in d.items() if k.startswith(prefix + ".")}

    try:
        train_flat = section("train")
        weights = LossWeights(**take(train_flat, "weights"))
        thresholds = MaskThresholds(**take(train_flat, "thresholds"))
        levels = LevelSpec(**take(train_flat, "levels"))
        aug = AugmentationConfig(**take(train_flat, "aug"))
        scalar = {k: v for k, v in train_flat.items() if "." not in k}
        scalar["lr_halve_epochs"] = tuple(scalar.get("lr_halve_epochs", ()))
        train = TrainConfig(weights=weights, thresholds=thresholds,
                            levels=levels, aug=aug, **scalar)
        model_kwargs = section("model")
        for k in ("stage_channels", "decoder_widths", "restore_channels"):
            model_kwargs[k] = tuple(model_kwargs[k])
        return Config(
            train=train,
            model=ModelConfig(**model_kwargs),
            data=DataConfig(**section("data")),
            gen=GenConfig(**section("gen")),
            run=RunConfig(**section("run")),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _flatten_nested_json(blob: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in blob.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten_nested_json(v, prefix=f"{key}."))
        else:
            out[key] = v
    return out


def load_config(path) -> Config:
    """Load a JSON config (flat dotted keys; nested objects also accepted).

    An optional "profile" key ("desk" or "full") selects the base defaults.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(blob, dict):
        raise ConfigError(f"{path}: top-level JSON object expected")
    flat = _flatten_nested_json(blob)
    profile = flat.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return from_flat(flat, base=PROFILES[profile]())


def save_config(config: Config, path) -> None:
    flat = to_flat(config)
    Path(path).write_text(json.dumps(flat, indent=2, sort_keys=True) + "\n")


def apply_overrides(config: Config, overrides: list[str]) -> Config:
    """Apply repeatable --set key=value pairs (values parsed as JSON when possible)."""
    flat = to_flat(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in flat:
            raise ConfigError(f"unknown config key: {key}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        flat[key] = value
    return from_flat(flat, base=config)
