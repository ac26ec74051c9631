"""Run configuration.

A run is described by one flat ``key: value`` YAML file. Keys are grouped into
:class:`ModelConfig`, :class:`DataConfig` and :class:`TrainConfig`; every key is
unique across the three groups, so the file stays flat and ``--set key=value``
overrides need no prefixes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from cliptnseg.errors import ConfigError

DEFAULT_PROMPT = "a photo of a thyroid nodule"


@dataclass
class ModelConfig:
    # "tiny-random", a local directory, or a model-hub identifier
    backbone: str = "tiny-random"
    backbone_seed: int = 0
    resolution: int = 352
    patch_size: int = 16
    extract_layers: list[int] = field(default_factory=lambda: [3, 7, 9])
    proj_dim: int = 64
    decoder_heads: int = 4
    decoder_mlp_ratio: int = 4
    fgb_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    fgb_blocks: int = 2
    fgb_out: int = 64
    head_channels: int = 64
    # only used by the tiny-random backbone
    tiny_width: int = 64
    tiny_depth: int = 12
    tiny_heads: int = 4
    tiny_text_width: int = 64
    tiny_text_depth: int = 2
    tiny_embed_dim: int = 64

    def validate(self) -> None:
        if self.resolution <= 0 or self.patch_size <= 0:
            raise ConfigError("resolution and patch_size must be positive")
        if self.resolution % self.patch_size:
            raise ConfigError(
                f"resolution {self.resolution} is not divisible by patch size {self.patch_size}"
            )
        depth = len(self.fgb_channels)
        if depth < 1:
            raise ConfigError("fgb_channels needs at least one stage")
        if self.resolution % (2**depth):
            raise ConfigError(
                f"resolution {self.resolution} is not divisible by 2**{depth} "
                f"(fine branch depth {depth})"
            )
        layers = list(self.extract_layers)
        if not layers:
            raise ConfigError("extract_layers is empty")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError(f"extract_layers must be strictly increasing, got {layers}")
        if layers[0] < 0:
            raise ConfigError("extract_layers must be non-negative")
        if self.backbone == "tiny-random" and layers[-1] >= self.tiny_depth:
            raise ConfigError(
                f"layer index {layers[-1]} out of range for a {self.tiny_depth}-layer encoder"
            )
        if self.proj_dim % self.decoder_heads:
            raise ConfigError("proj_dim must be divisible by decoder_heads")
        for name in ("proj_dim", "fgb_blocks", "fgb_out", "head_channels", "decoder_mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(c < 1 for c in self.fgb_channels):
            raise ConfigError("fgb_channels must be positive")


@dataclass
class DataConfig:
    manifest: str = ""
    # defaults to the manifest's directory
    data_root: str = ""
    train_split: str = "train"
    val_split: str = "val"
    default_prompt: str = DEFAULT_PROMPT
    augment: bool = True
    scale_factor: float = 1.1
    rotation_min: float = 0.0
    rotation_max: float = 20.0
    translation_min: float = 0.99
    translation_max: float = 1.01

    def validate(self) -> None:
        if self.scale_factor < 1.0:
            raise ConfigError("scale_factor must be >= 1")
        if self.rotation_min > self.rotation_max:
            raise ConfigError("rotation_min > rotation_max")
        if not 0 < self.translation_min <= self.translation_max:
            raise ConfigError("translation range must satisfy 0 < min <= max")
        if not self.default_prompt.strip():
            raise ConfigError("default_prompt is empty")


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    max_iters: int = 20000
    batch_size: int = 16
    val_every: int = 500
    seed: int = 0
    mixed_precision: bool = False
    checkpoint_dir: str = "runs/default"
    clip_norm: float | None = None
    threshold: float = 0.5

    def validate(self) -> None:
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"lr_min ({self.lr_min}) must be < lr_max ({self.lr_max})")
        if self.max_iters <= 0:
            raise ConfigError("max_iters must be > 0")
        if not 0 < self.val_every <= self.max_iters:
            raise ConfigError("val_every must be in [1, max_iters]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")


_GROUPS = ("model", "data", "train")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> RunConfig:
        self.model.validate()
        self.data.validate()
        self.train.validate()
        return self

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for group in _GROUPS:
            flat.update(dataclasses.asdict(getattr(self, group)))
        return flat

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> RunConfig:
        cfg = cls()
        owner = _key_owner()
        for key, value in values.items():
            if key not in owner:
                raise ConfigError(f"unknown config key: {key!r}")
            group = getattr(cfg, owner[key])
            setattr(group, key, _coerce(key, value, getattr(group, key)))
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_flat(), sort_keys=False))


def _key_owner() -> dict[str, str]:
    owner = {}
    for group, klass in zip(_GROUPS, (ModelConfig, DataConfig, TrainConfig)):
        for f in fields(klass):
            owner[f.name] = group
    return owner


def _coerce(key: str, value: Any, default: Any) -> Any:
    if value is None:
        if key == "clip_norm":
            return None
        raise ConfigError(f"{key} may not be null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float) or key == "clip_norm":
        if isinstance(value, str):
            # YAML 1.1 reads "3e-4" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{key} expects a list of integers, got {value!r}")
        return list(value)
    if isinstance(default, str):
        return str(value)
    return value


def parse_overrides(overrides: list[str] | None) -> dict[str, Any]:
    """Parse ``key=value`` strings; values use YAML scalar syntax."""
    out: dict[str, Any] = {}
    owner = _key_owner()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in owner:
            raise ConfigError(f"unknown config key: {key!r}")
        try:
            out[key] = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read a flat YAML run config, apply overrides, validate."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            loaded = yaml.safe_load(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {p} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must be a flat key: value mapping")
        for key, value in loaded.items():
            if isinstance(value, dict):
                raise ConfigError(f"config must be flat; key {key!r} holds a mapping")
        values.update(loaded)
        # relative dataset paths are resolved against the config file
        manifest = values.get("manifest")
        if manifest and not Path(str(manifest)).is_absolute():
            values["manifest"] = str((p.parent / str(manifest)).resolve())
    overridden = parse_overrides(overrides)
    values.update(overridden)
    return RunConfig.from_flat(values).validate()
