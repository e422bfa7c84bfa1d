"""Top-down feature aggregation and the initial mask prediction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import PyramidFeatures


def upsample_to_base(stage: torch.Tensor, target_hw: Sequence[int]) -> torch.Tensor:
    """Bilinear resize with ``align_corners=True`` (corner samples are kept)."""
    target_hw = tuple(int(s) for s in target_hw)
    if tuple(stage.shape[-2:]) == target_hw:
        return stage
    if any(t < s for t, s in zip(target_hw, stage.shape[-2:])):
        raise ValueError(f"cannot upsample {tuple(stage.shape[-2:])} down to {target_hw}")
    squeeze = stage.dim() == 3
    x = stage.unsqueeze(0) if squeeze else stage
    x = F.interpolate(x, size=target_hw, mode="bilinear", align_corners=True)
    return x.squeeze(0) if squeeze else x


@dataclass
class AggregatedFeatures:
    d_stages: tuple[torch.Tensor, ...]  # D_0..D_3, all at E_0 resolution
    decoder_width: int


@dataclass
class InitialPrediction:
    logits: torch.Tensor  # N x 1 x h x w
    mask: torch.Tensor  # N x h x w, bool

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "InitialPrediction":
        return cls(logits, (torch.sigmoid(logits) > 0.5)[:, 0])


class ChannelMismatchError(ValueError):
    pass


class FeatureAggregation(nn.Module):
    """Build ``D_3 .. D_0`` from the encoder pyramid.

    ``D_3`` is the projected, upsampled deepest stage. Every shallower level
    concatenates a 1x1 projection of the level above with the upsampled encoder
    stage and projects back to ``width`` channels.
    """

    def __init__(self, in_channels: Sequence[int], width: int):
        super().__init__()
        self.in_channels = tuple(int(c) for c in in_channels)
        self.width = int(width)
        self.top = nn.Conv2d(self.in_channels[3], width, 1)
        # index i handles D_i for i = 0, 1, 2
        self.carry = nn.ModuleList(nn.Conv2d(width, width, 1) for _ in range(3))
        self.fuse = nn.ModuleList(nn.Conv2d(width + c, width, 1) for c in self.in_channels[:3])

    def forward(self, pyramid: PyramidFeatures) -> AggregatedFeatures:
        stages = pyramid.stages
        if len(stages) != 4:
            raise ValueError(f"expected four pyramid stages, got {len(stages)}")
        got = tuple(s.shape[1] for s in stages)
        if got != self.in_channels:
            raise ChannelMismatchError(f"pyramid channels {got} != configured {self.in_channels}")
        base = stages[0].shape[-2:]
        d = [None] * 4
        d[3] = self.top(upsample_to_base(stages[3], base))
        for i in (2, 1, 0):
            e = upsample_to_base(stages[i], base)
            d[i] = self.fuse[i](torch.cat([self.carry[i](d[i + 1]), e], dim=1))
        return AggregatedFeatures(tuple(d), self.width)


def aggregate(pyramid: PyramidFeatures, module: FeatureAggregation) -> AggregatedFeatures:
    return module(pyramid)


class MaskHead(nn.Module):
    """1x1 projection to a single logit channel."""

    def __init__(self, width: int):
        super().__init__()
        self.proj = nn.Conv2d(width, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


def predict_initial(d0: torch.Tensor, head: MaskHead) -> InitialPrediction:
    if d0.dim() == 3:
        d0 = d0.unsqueeze(0)
    return InitialPrediction.from_logits(head(d0))
