"""Configuration dataclasses, presets and dotted-path overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from mdnet.errors import ConfigError

PATCH_STRIDES = (4, 2, 2, 2)
FEATURE_STRIDES = (4, 8, 16, 32)
DILATION_RATES = (1, 3, 6, 9)


@dataclass
class EncoderConfig:
    stage_widths: tuple[int, int, int, int] = (64, 128, 320, 512)
    stage_depths: tuple[int, int, int, int] = (3, 4, 6, 3)
    attention_heads: tuple[int, int, int, int] = (1, 2, 5, 8)
    spatial_reduction: tuple[int, int, int, int] = (8, 4, 2, 1)
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        for name in ("stage_widths", "stage_depths", "attention_heads", "spatial_reduction"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"encoder.{name} must have 4 entries, got {len(value)}")
            if any(v < 1 for v in value):
                raise ConfigError(f"encoder.{name} entries must be positive, got {value}")
            setattr(self, name, value)
        for i, (w, h) in enumerate(zip(self.stage_widths, self.attention_heads)):
            if w % h:
                raise ConfigError(f"stage {i + 1} width {w} not divisible by {h} heads")
        if self.mlp_ratio <= 0:
            raise ConfigError("encoder.mlp_ratio must be positive")


@dataclass
class ModelConfig:
    preset: str = "full"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    series_len: int = 2
    ma_bg_add: str = "fg"
    msfed_reuse: str = "pre_dc"
    cbam_reduction: int = 16
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.series_len < 1:
            raise ConfigError("series_len must be >= 1")
        if self.ma_bg_add not in ("fg", "bg"):
            raise ConfigError(f"ma_bg_add must be 'fg' or 'bg', got {self.ma_bg_add!r}")
        if self.msfed_reuse not in ("pre_dc", "post_dc"):
            raise ConfigError(f"msfed_reuse must be 'pre_dc' or 'post_dc', got {self.msfed_reuse!r}")
        if self.cbam_reduction < 1:
            raise ConfigError("cbam_reduction must be >= 1")

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return self.encoder.stage_widths

    @classmethod
    def full(cls) -> ModelConfig:
        return cls(preset="full")

    @classmethod
    def tiny(cls) -> ModelConfig:
        return cls(
            preset="tiny",
            encoder=EncoderConfig(
                stage_widths=(8, 16, 24, 32),
                stage_depths=(1, 1, 1, 1),
                attention_heads=(1, 2, 3, 4),
                spatial_reduction=(8, 4, 2, 1),
                mlp_ratio=4.0,
            ),
            cbam_reduction=4,
        )

    @classmethod
    def from_preset(cls, name: str) -> ModelConfig:
        presets = {"full": cls.full, "tiny": cls.tiny}
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return presets[name]()

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        data = dict(data)
        base = cls.from_preset(data.pop("preset", "full"))
        merged = base.to_dict()
        _merge_strict(merged, data, "model")
        return cls(**merged)


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    max_epochs: int = 500
    patience: int = 50
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dice_smooth: float = 1.0
    freeze_encoder: bool = False
    hflip: bool = False
    recalibrate_bn: bool = True
    dtype: str = "float32"

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience >= self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs one weight per decoder head")
        if any(w < 0 for w in self.loss_weights) or not any(w > 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be >= 0 and not all zero")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))


@dataclass
class PreprocessConfig:
    window: tuple[float, float] = (-200.0, 250.0)
    size: int = 512
    foreground_only: bool = False
    label_mapping: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        self.window = (float(self.window[0]), float(self.window[1]))
        if self.window[0] >= self.window[1]:
            raise ConfigError(f"degenerate HU window {self.window}: lower bound must be < upper bound")
        if self.size < 1:
            raise ConfigError("size must be positive")
        if self.label_mapping is not None:
            self.label_mapping = tuple(int(v) for v in self.label_mapping)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))


@dataclass
class RunConfig:
    """Merged model/train/preprocess view used by the command-line tools."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "preprocess": self.preprocess.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        unknown = set(data) - {"model", "train", "preprocess"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = ModelConfig.from_dict(data.get("model", {}))
        train = dict(TrainConfig().to_dict())
        _merge_strict(train, data.get("train", {}), "train")
        pre = dict(PreprocessConfig().to_dict())
        _merge_strict(pre, data.get("preprocess", {}), "preprocess")
        return cls(model=model, train=TrainConfig(**train), preprocess=PreprocessConfig(**pre))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def load_run_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    preset: str | None = None,
) -> RunConfig:
    """Build a RunConfig with precedence defaults < preset < file < overrides."""
    data: dict[str, Any] = {"model": {"preset": preset or "full"}}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section, values in loaded.items():
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: section {section!r} must be a mapping")
            data.setdefault(section, {}).update(values)
        if preset is not None:
            data["model"]["preset"] = preset
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(data, key, value)
    return RunConfig.from_dict(data)


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if "." not in key:
        raise ConfigError(f"override key {key!r} must be a dotted path such as train.learning_rate")
    return key, yaml.safe_load(raw)


def _set_dotted(data: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
    node[parts[-1]] = value


def _merge_strict(base: dict[str, Any], update: dict[str, Any], where: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be a mapping")
            _merge_strict(base[key], value, f"{where}.{key}")
        else:
            base[key] = value


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj

