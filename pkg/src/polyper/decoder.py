"""The full model: encoder, boundary extraction, staged refinement and heads.

Also holds the checkpoint container (``.npz``): a magic string, a format
version, the JSON config echo, and one array per named parameter under
``param/<name>``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .aggregation import AggregatedFeatures, FeatureAggregation, InitialPrediction, MaskHead, upsample_to_base
from .bsa import AttentionProbe, BoundarySensitiveAttention
from .config import Mode, RunConfig, parse_mode
from .encoder import STRIDES, ToyEncoder, check_input_size
from .region_ops import RegionPartition, fallback_partition, whole_mask_partition

CHECKPOINT_MAGIC = "POLYPER-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class PolyperOutput:
    initial_logits: torch.Tensor  # N x 1 x H/4 x W/4
    final_logits: torch.Tensor  # N x 1 x H x W
    partition: RegionPartition  # batched, N x H/4 x W/4
    refined_stages: tuple  # F_3, F_2, F_1, F_0; empty when refinement is off
    aggregated: AggregatedFeatures

    @property
    def initial_mask(self) -> torch.Tensor:
        return InitialPrediction.from_logits(self.initial_logits).mask


class Polyper(nn.Module):
    def __init__(
        self,
        encoder_channels: Sequence[int] = (32, 64, 128, 256),
        width: int = 32,
        spatial_heads: int = 4,
        channel_heads: int = 4,
        iterations: int = 4,
        mode: str | Mode = "full",
        encoder: nn.Module | None = None,
    ):
        super().__init__()
        self.mode = parse_mode(mode) if isinstance(mode, str) else mode
        self.iterations = int(iterations)
        self.encoder = encoder if encoder is not None else ToyEncoder(encoder_channels)
        self.aggregation = FeatureAggregation(encoder_channels, width)
        self.initial_head = MaskHead(width)
        # refine[i] refines level D_i; stage_proj[i] carries F_{i+1} into level i
        self.refine = nn.ModuleList(
            BoundarySensitiveAttention(width, spatial_heads, channel_heads) for _ in range(4)
        )
        self.stage_proj = nn.ModuleList(nn.Conv2d(width, width, 1) for _ in range(3))
        self.final_head = MaskHead(width)

    @classmethod
    def from_config(cls, config: RunConfig) -> "Polyper":
        return cls(
            encoder_channels=config.encoder_channels,
            width=config.decoder_width,
            spatial_heads=config.spatial_heads,
            channel_heads=config.channel_heads,
            iterations=config.iterations,
            mode=config.parsed_mode,
        )

    def regions(self, mask: torch.Tensor, mode: Mode | None = None) -> RegionPartition:
        mode = mode or self.mode
        mask = mask.detach().cpu().numpy()
        if mode.whole_mask:
            return whole_mask_partition(mask, self.iterations)
        return fallback_partition(mask, self.iterations)

    def forward(self, image: torch.Tensor, mode: Mode | str | None = None,
                probe: AttentionProbe | None = None,
                partition: RegionPartition | None = None) -> PolyperOutput:
        """Run the network; ``partition`` pins the region masks instead of deriving them."""
        if isinstance(mode, str):
            mode = parse_mode(mode)
        mode = mode or self.mode
        if image.dim() == 3:
            image = image.unsqueeze(0)
        check_input_size(*image.shape[-2:])
        agg = self.aggregation(self.encoder(image))
        d = agg.d_stages
        initial_logits = self.initial_head(d[0])
        initial = InitialPrediction.from_logits(initial_logits)
        # masks are constants of the forward pass: no gradient through thresholding or morphology
        if partition is None:
            partition = self.regions(initial.mask, mode)

        refined: list[torch.Tensor] = []
        if mode.refine:
            f = None
            for i in (3, 2, 1, 0):
                x = d[3] if f is None else self.stage_proj[i](f) + d[i]
                if i >= 4 - mode.stages:
                    x = self.refine[i](x, partition, probe,
                                       use_spatial=mode.use_spatial, use_channel=mode.use_channel)
                f = x
                refined.append(f)
            top = f
        else:
            top = d[0]
        logits = upsample_to_base(self.final_head(top), image.shape[-2:])
        return PolyperOutput(initial_logits, logits, partition, tuple(refined), agg)


class PBEModel(nn.Module):
    """Boundary-extraction-only network: encoder, aggregation, and a head on ``D_0``.

    Parameter names match :class:`Polyper`, so its state dict loads with ``strict=False``.
    """

    def __init__(self, encoder_channels: Sequence[int] = (32, 64, 128, 256), width: int = 32):
        super().__init__()
        self.encoder = ToyEncoder(encoder_channels)
        self.aggregation = FeatureAggregation(encoder_channels, width)
        self.initial_head = MaskHead(width)
        self.final_head = MaskHead(width)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        d0 = self.aggregation(self.encoder(image)).d_stages[0]
        return upsample_to_base(self.final_head(d0), image.shape[-2:])


def ablation_mode(config: RunConfig) -> Polyper:
    """Build the model variant selected by ``config.mode``."""
    return Polyper.from_config(config)


def output_size(height: int, width: int) -> tuple[int, int]:
    check_input_size(height, width)
    return height // STRIDES[0], width // STRIDES[0]


def save_checkpoint(path: str | Path, model: nn.Module, config: RunConfig, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__magic__"] = np.array(CHECKPOINT_MAGIC)
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config__"] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


class CheckpointError(ValueError):
    pass


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], RunConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__magic__" not in data or str(data["__magic__"]) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a polyper checkpoint")
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = RunConfig.from_dict(json.loads(str(data["__config__"])))
        meta = json.loads(str(data["__meta__"]))
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    return params, config, meta


def load_checkpoint(path: str | Path) -> tuple[Polyper, RunConfig, dict]:
    params, config, meta = read_checkpoint(path)
    model = Polyper.from_config(config)
    expected = set(model.state_dict())
    missing, unexpected = sorted(expected - set(params)), sorted(set(params) - expected)
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing parameters {missing[:5]}, unexpected {unexpected[:5]}")
    state = {k: torch.from_numpy(v) for k, v in params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, config, meta
