"""Small convolutional pyramid used in place of a pretrained transformer backbone."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn as nn

STRIDES = (4, 8, 16, 32)


class PyramidFeatures(NamedTuple):
    """Four encoder stages, finest first, at strides 4/8/16/32."""

    stages: tuple[torch.Tensor, ...]
    strides: tuple[int, ...] = STRIDES

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.shape[1] for s in self.stages)


class SizingError(ValueError):
    pass


def check_input_size(height: int, width: int) -> None:
    for name, size in (("height", height), ("width", width)):
        if size % STRIDES[-1]:
            raise SizingError(f"input {name} {size} is not divisible by {STRIDES[-1]}")


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(1, cout),
        nn.GELU(),
    )


class ToyEncoder(nn.Module):
    """Strided conv pyramid: a stride-4 stem, then one stride-2 block per stage.

    Any module returning :class:`PyramidFeatures` with the same contract can be
    swapped in.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        if len(channels) != 4:
            raise ValueError(f"need four stage widths, got {list(channels)}")
        self.channels = tuple(int(c) for c in channels)
        c0 = self.channels[0]
        self.stem = nn.Sequential(
            _conv_block(in_channels, c0 // 2 or 1, 2),
            _conv_block(c0 // 2 or 1, c0, 2),
            _conv_block(c0, c0, 1),
        )
        self.stages = nn.ModuleList(
            nn.Sequential(_conv_block(cin, cout, 2), _conv_block(cout, cout, 1))
            for cin, cout in zip(self.channels[:-1], self.channels[1:])
        )

    def forward(self, image: torch.Tensor) -> PyramidFeatures:
        check_input_size(*image.shape[-2:])
        x = self.stem(image)
        feats = [x]
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return PyramidFeatures(tuple(feats))


def encode(image: torch.Tensor, encoder: nn.Module) -> PyramidFeatures:
    """Run ``encoder`` on a ``3xHxW`` or ``Nx3xHxW`` image."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return encoder(image)
