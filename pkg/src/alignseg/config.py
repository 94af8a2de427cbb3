"""Run configuration: every hyperparameter with its default, nested per subsystem.

A resolved ``TrainConfig`` is the single source of truth for a run. It
round-trips through YAML and accepts dotted-key overrides such as
``loss.lambda=[1,0,0]`` or ``align.num_context_tokens=2``.
"""

from __future__ import annotations

import keyword
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for malformed config files, keys, or values."""


@dataclass
class DataConfig:
    root: str = ""
    num_classes: int = 2
    # images are scaled to [0,1] on load, then standardized per channel
    mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])


@dataclass
class AugmentConfig:
    crop: int = 256
    scale_min: float = 0.5
    scale_max: float = 2.0
    hflip_prob: float = 0.5
    color_jitter_prob: float = 0.5
    color_jitter_strength: float = 0.25
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    cutmix_prob: float = 1.0
    cutmix_area_min: float = 0.1
    cutmix_area_max: float = 0.5
    cutmix_aspect_min: float = 0.5
    cutmix_aspect_max: float = 2.0
    feature_perturb_rate: float = 0.5


@dataclass
class EncoderConfig:
    kind: str = "toy"  # registry key; "toy" is the only built-in
    patch_size: int = 16
    width: int = 768
    taps: list[int] = field(default_factory=lambda: [2, 9])
    seed: int = 0


@dataclass
class TextEncoderConfig:
    kind: str = "toy"  # registry key; "toy" is the only built-in
    vocab_size: int = 64
    token_dim: int = 64
    text_dim: int = 512
    seq_len: int = 16
    seed: int = 0


@dataclass
class AlignConfig:
    embed_dim: int = 256
    num_context_tokens: int = 4
    class_names: list[str] = field(default_factory=lambda: ["background tissue", "gland"])
    temperature: float = 1.0
    context_init_std: float = 0.02
    use_prototype: bool = True
    use_text: bool = True


@dataclass
class ModelConfig:
    low_channels: int = 256
    high_channels: int = 2048
    low_reduced_channels: int = 48
    aspp_channels: int = 256
    aspp_rates: list[int] = field(default_factory=lambda: [1, 6, 12, 18])
    decoder_channels: int = 256
    norm_groups: int = 8


@dataclass
class FusionConfig:
    eta_p: float = 0.1
    eta_t: float = 0.1


@dataclass
class PseudoConfig:
    tau_init: float = 0.7
    ema_alpha: float = 0.999
    tau_min: float = 0.5
    tau_max: float = 0.95


@dataclass
class LossConfig:
    # unsupervised term weights [hard, soft, correlation]
    lambda_: list[float] = field(default_factory=lambda: [0.5, 0.25, 0.25])
    kl_stopgrad_target: bool = True
    align_kind: str = "mse"  # {none, cosine, kl, mse}


@dataclass
class OptimConfig:
    epochs: int = 80
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    # when set, overrides epochs * iters_per_epoch (desk-scale runs)
    total_steps: int | None = None


@dataclass
class TrainConfig:
    seed: int = 0
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)


def _field_name(section: Any, key: str) -> str:
    # allow external keys that collide with Python keywords ("lambda" -> "lambda_")
    if keyword.iskeyword(key):
        key = key + "_"
    names = {f.name for f in fields(section)}
    if key not in names:
        raise ConfigError(f"unknown config key '{key}' in {type(section).__name__}")
    return key


def _public_name(name: str) -> str:
    if name.endswith("_") and keyword.iskeyword(name[:-1]):
        return name[:-1]
    return name


def to_dict(cfg: Any) -> dict:
    """Convert a (nested) config dataclass to plain dict with public key names."""
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[_public_name(f.name)] = value
    return out


def _from_dict(cls: type, data: dict) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"expected mapping for {cls.__name__}, got {type(data).__name__}")
    defaults = cls()
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = key + "_" if keyword.iskeyword(key) else key
        if name not in names:
            raise ConfigError(f"unknown config key '{key}' in {cls.__name__}")
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> TrainConfig:
    return _from_dict(TrainConfig, data)


def to_yaml(cfg: TrainConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def from_yaml(text: str) -> TrainConfig:
    data = yaml.safe_load(text)
    if data is None:
        return TrainConfig()
    return from_dict(data)


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return from_yaml(f.read())


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_yaml(cfg))


def apply_override(cfg: TrainConfig, spec: str) -> None:
    """Apply one ``dotted.key=value`` override in place; value parsed as YAML."""
    if "=" not in spec:
        raise ConfigError(f"override '{spec}' is not of the form key=value")
    dotted, raw = spec.split("=", 1)
    parts = dotted.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override '{spec}' has an empty key segment")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value '{raw}': {exc}") from exc
    target = cfg
    for part in parts[:-1]:
        name = _field_name(target, part)
        target = getattr(target, name)
        if not is_dataclass(target):
            raise ConfigError(f"'{part}' in '{dotted}' is not a config section")
    name = _field_name(target, parts[-1])
    current = getattr(target, name)
    if is_dataclass(current):
        raise ConfigError(f"'{dotted}' names a section, not a value")
    if isinstance(current, tuple):
        value = tuple(value)
    setattr(target, name, value)


def apply_overrides(cfg: TrainConfig, specs: list[str]) -> None:
    for spec in specs:
        apply_override(cfg, spec)
