"""Run configuration: one flat, fully validated record.

Config files are flat YAML mappings (``key: value`` per line, no nesting).
Unknown keys and bad enum values are rejected when the file is loaded.
"""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import yaml

OUTPUT_ROOT_ENV = "POLYPER_OUTPUT_ROOT"

MODES = ("full", "no_bsr", "no_rs", "spatial_only", "channel_only")
_STAGES_RE = re.compile(r"^stages_subset\((\d)\)$")


class ConfigError(ValueError):
    pass


class Mode(NamedTuple):
    """Parsed model variant. ``stages`` counts refined levels, deepest first."""

    name: str
    stages: int = 4

    @property
    def refine(self) -> bool:
        return self.name != "no_bsr"

    @property
    def use_spatial(self) -> bool:
        return self.name != "channel_only"

    @property
    def use_channel(self) -> bool:
        return self.name != "spatial_only"

    @property
    def whole_mask(self) -> bool:
        return self.name == "no_rs"

    def __str__(self) -> str:
        return f"stages_subset({self.stages})" if self.name == "stages_subset" else self.name


def parse_mode(text: str) -> Mode:
    text = str(text).strip()
    if text in MODES:
        return Mode(text)
    m = _STAGES_RE.match(text)
    if m and 1 <= int(m.group(1)) <= 4:
        return Mode("stages_subset", int(m.group(1)))
    raise ConfigError(f"unknown mode {text!r}; expected one of {MODES} or stages_subset(1..4)")


@dataclass
class RunConfig:
    mode: str = "full"
    iterations: int = 4  # erosion/dilation count T
    decoder_width: int = 32
    spatial_heads: int = 4
    channel_heads: int = 4
    encoder_channels: list = field(default_factory=lambda: [32, 64, 128, 256])
    optimizer: str = "adamw"
    lr: float = 2e-4
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    eval_every: int = 250
    aux_weight: float = 0.4
    warmup_fraction: float = 0.1
    seed: int = 0
    data_seed: int = 0
    image_size: int = 64
    train_images: str | None = None
    train_masks: str | None = None
    val_images: str | None = None
    val_masks: str | None = None
    synth_train: int = 200
    synth_val: int = 50
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    @property
    def parsed_mode(self) -> Mode:
        return parse_mode(self.mode)

    def validate(self) -> None:
        parse_mode(self.mode)
        positive = ("iterations", "decoder_width", "spatial_heads", "channel_heads",
                    "steps", "batch_size", "eval_every", "image_size")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.decoder_width % self.spatial_heads or self.decoder_width % self.channel_heads:
            raise ConfigError(
                f"decoder_width {self.decoder_width} must be divisible by both head counts"
            )
        if len(self.encoder_channels) != 4 or any(int(c) < 1 for c in self.encoder_channels):
            raise ConfigError(f"encoder_channels needs four positive widths, got {self.encoder_channels}")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if len(self.betas) != 2:
            raise ConfigError("betas needs two values")
        if self.lr <= 0 or self.weight_decay < 0 or self.aux_weight < 0:
            raise ConfigError("lr must be positive; weight_decay and aux_weight non-negative")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} is not divisible by 32")
        pairs = ((self.train_images, self.train_masks), (self.val_images, self.val_masks))
        for img, msk in pairs:
            if (img is None) != (msk is None):
                raise ConfigError("image and mask directories must be given together")

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in data.items():
            if isinstance(value, dict):
                raise ConfigError(f"config must be flat; {key!r} is a mapping")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a key/value mapping")
        return cls.from_dict(data)

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out
