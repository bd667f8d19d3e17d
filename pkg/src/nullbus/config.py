"""Run configuration: model and training settings, desk/paper presets, YAML I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

ABLATIONS = ("full", "zero_text", "zero_local", "zero_global")
SCALES = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 96
    output_size: int | None = None  # None: same as image_size
    # prompts
    text_encoder: str = "hash"  # hash | external
    text_dim: int = 64
    text_seed: int = 0
    embeddings_path: str | None = None
    prompt_dropout: float = 0.3
    null_noise: float = 0.01
    # global path
    backbone: str = "toy"  # toy | external
    backbone_path: str | None = None  # "module:factory" when backbone == external
    patch_size: int = 8
    token_dim: int = 64
    backbone_depth: int = 2
    backbone_heads: int = 4
    backbone_seed: int = 1234
    token_block_index: int = -2
    C_g: int = 64
    # local path
    width_multiplier: float = 1 / 16
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1)
    aspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    C_l: int = 32
    tcm_stages: tuple[int, ...] = (4, 5)
    # fusion / decoder
    C_f: int = 32
    decoder_channels: tuple[int, ...] = (32, 16, 16, 8)
    se_reduction: int = 4
    ablation: str = "full"

    def __post_init__(self):
        for name in ("stage_blocks", "aspp_rates", "tcm_stages", "decoder_channels"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.output_size is None:
            self.output_size = self.image_size
        self.validate()

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ConfigError(f"prompt_dropout must lie in [0, 1], got {self.prompt_dropout}")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder_channels needs exactly 4 entries (one per UpFusion stage)")
        if len(self.stage_blocks) != 4:
            raise ConfigError("stage_blocks needs 4 entries")
        if self.text_encoder not in ("hash", "external"):
            raise ConfigError(f"text_encoder must be 'hash' or 'external', got {self.text_encoder!r}")
        if self.backbone not in ("toy", "external"):
            raise ConfigError(f"backbone must be 'toy' or 'external', got {self.backbone!r}")

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(c * self.width_multiplier))) for c in (64, 256, 512, 1024, 2048))

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 32

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    scale: str = "desk"
    output_dir: str = "runs"
    manifest: list[str] = field(default_factory=list)
    folds_path: str | None = None
    k: int = 5
    seed: int = 0
    fold_index: int = 0
    epochs: int = 20
    max_steps: int | None = None
    batch_size: int = 8
    learning_rate: float = 1e-3
    epsilon: float = 1e-6
    threshold: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = model_config_from_dict(self.model)
        if isinstance(self.manifest, str):
            self.manifest = [self.manifest]
        self.validate()

    def validate(self) -> None:
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if not 0 <= self.fold_index < self.k:
            raise ConfigError(f"fold_index {self.fold_index} outside [0, {self.k})")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        self.model.validate()

    @property
    def p(self) -> float:
        return self.model.prompt_dropout

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["manifest"] = list(self.manifest)
        d["model"] = self.model.to_dict()
        return d


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "epochs": 20,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "model": {},
    },
    "paper": {
        "epochs": 100,
        "batch_size": 8,
        "learning_rate": 1e-4,
        "model": {
            "image_size": 352,
            "text_dim": 512,
            "patch_size": 16,
            "token_dim": 768,
            "backbone_heads": 12,
            "C_g": 2048,
            "width_multiplier": 1.0,
            "stage_blocks": [3, 4, 6, 3],
            "C_l": 512,
            "C_f": 512,
            "decoder_channels": [256, 128, 64, 32],
        },
    },
}


def _check_keys(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def model_config_from_dict(data: dict[str, Any]) -> ModelConfig:
    _check_keys(data, {f.name for f in fields(ModelConfig)}, "model")
    return ModelConfig(**data)


def build_config(data: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Expand the ``scale`` preset, then apply ``data`` and ``overrides`` (later wins).

    Model keys go under ``model``; unknown keys anywhere raise ConfigError.
    """
    data = dict(data or {})
    overrides = dict(overrides or {})
    top_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(ModelConfig)}
    _check_keys(data, top_keys, "config")
    # flag overrides may name model keys directly
    _check_keys(overrides, top_keys | model_keys, "override")

    scale = overrides.get("scale", data.get("scale", "desk"))
    if scale not in PRESETS:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    preset = PRESETS[scale]
    merged: dict[str, Any] = {k: v for k, v in preset.items() if k != "model"}
    model: dict[str, Any] = dict(preset["model"])
    model.update(data.pop("model", None) or {})
    merged.update(data)
    for key, value in overrides.items():
        if key in model_keys and key not in top_keys:
            model[key] = value
        elif key == "model":
            model.update(value)
        else:
            merged[key] = value
    merged["scale"] = scale
    merged["model"] = model_config_from_dict(model)
    return TrainConfig(**merged)


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(data, overrides)


def save_config(config: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
    return path
