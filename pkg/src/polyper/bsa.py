"""Boundary sensitive attention.

Two parallel branches refine a feature map given a region partition:

* spatial: boundary pixels attend to interior pixels only. Features are
  gathered into ``B x C`` / ``M x C`` matrices, so scores are ``B x M`` per head
  and the result is written back to the boundary positions.
* channel: transposed (channel-by-channel) attention between two
  background-inclusive copies of the map, boundary+background as queries and
  interior+background as keys/values.

The block returns ``proj_s(F_S) + proj_c(F_C) + x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .region_ops import RegionPartition


@dataclass
class RegionGather:
    positions: torch.Tensor  # K x 2 (row, col), row-major
    features: torch.Tensor  # K x C

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def with_features(self, features: torch.Tensor) -> "RegionGather":
        return RegionGather(self.positions, features)


@dataclass
class AttentionProbe:
    """Per-call recorder for attention internals; pass one to a forward call to inspect it."""

    spatial_score_shapes: list = field(default_factory=list)
    spatial_weights: list = field(default_factory=list)
    channel_weights: list = field(default_factory=list)
    spatial_contributions: list = field(default_factory=list)

    @property
    def spatial_score_elements(self) -> int:
        return sum(math.prod(s) for s in self.spatial_score_shapes)


def _region_tensor(region, device=None) -> torch.Tensor:
    if isinstance(region, np.ndarray):
        region = torch.from_numpy(np.ascontiguousarray(region))
    return region.to(device=device, dtype=torch.bool)


def gather(fmap: torch.Tensor, region) -> RegionGather:
    """Collect the ``C``-vectors of ``fmap`` (``C x H x W``) at the true pixels of ``region``."""
    region = _region_tensor(region, fmap.device)
    if region.shape != fmap.shape[-2:]:
        raise ValueError(f"region {tuple(region.shape)} does not match map {tuple(fmap.shape[-2:])}")
    width = fmap.shape[-1]
    idx = region.reshape(-1).nonzero().squeeze(1)
    positions = torch.stack([idx // width, idx % width], dim=1)
    features = fmap.reshape(fmap.shape[0], -1).index_select(1, idx).t()
    return RegionGather(positions, features)


def scatter_add(base: torch.Tensor, gathered: RegionGather) -> torch.Tensor:
    """Write gathered rows back into a copy of ``base`` at their positions."""
    if gathered.count == 0:
        return base
    c, h, w = base.shape
    rows, cols = gathered.positions[:, 0], gathered.positions[:, 1]
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w:
        raise IndexError(f"gather positions fall outside a {h}x{w} map")
    idx = rows * w + cols
    flat = base.reshape(c, h * w).index_copy(1, idx, gathered.features.t().to(base.dtype))
    return flat.reshape(c, h, w)


class SpatialCrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} spatial heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        # a key bias shifts every score of a query equally, which softmax cancels
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, f_br: RegionGather, f_cr: RegionGather, probe: AttentionProbe | None = None):
        return spatial_cross_attention(f_br, f_cr, self, probe)


def spatial_cross_attention(
    f_br: RegionGather,
    f_cr: RegionGather,
    params: SpatialCrossAttention,
    probe: AttentionProbe | None = None,
) -> RegionGather:
    """Multi-head attention of boundary rows (queries) over interior rows (keys/values)."""
    if f_br.count == 0 or f_cr.count == 0:
        return f_br
    b, c = f_br.features.shape
    m = f_cr.count
    h = params.heads
    dh = c // h
    q = params.q(f_br.features).reshape(b, h, dh).transpose(0, 1)
    k = params.k(f_cr.features).reshape(m, h, dh).transpose(0, 1)
    v = params.v(f_cr.features).reshape(m, h, dh).transpose(0, 1)
    scores = q @ k.transpose(1, 2) / math.sqrt(dh)  # h x B x M
    weights = scores.softmax(dim=-1)
    if probe is not None:
        probe.spatial_score_shapes.append(tuple(scores.shape))
        probe.spatial_weights.append(weights.detach())
    out = (weights @ v).transpose(0, 1).reshape(b, c)
    return f_br.with_features(params.out(out))


class ChannelCrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} channel heads")
        self.heads = heads
        self.q = nn.Conv2d(dim, dim, 1)
        self.k = nn.Conv2d(dim, dim, 1)
        self.v = nn.Conv2d(dim, dim, 1)
        self.out = nn.Conv2d(dim, dim, 1)
        # log-parametrised so the temperature stays positive; starts at 1
        self.log_temperature = nn.Parameter(torch.zeros(heads))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def forward(self, f_br_bg, f_cr_bg, probe: AttentionProbe | None = None):
        return channel_cross_attention(f_br_bg, f_cr_bg, self, probe)


def channel_cross_attention(
    f_br_bg: torch.Tensor,
    f_cr_bg: torch.Tensor,
    params: ChannelCrossAttention,
    probe: AttentionProbe | None = None,
) -> torch.Tensor:
    """Transposed attention: a per-head ``C/h x C/h`` affinity from spatially flattened maps.

    Queries and keys are L2-normalised over space before the product, then scaled
    by the learned per-head temperature. Accepts ``C x H x W`` or ``N x C x H x W``.
    """
    if f_br_bg.shape != f_cr_bg.shape:
        raise ValueError(f"shape mismatch {tuple(f_br_bg.shape)} vs {tuple(f_cr_bg.shape)}")
    squeeze = f_br_bg.dim() == 3
    if squeeze:
        f_br_bg, f_cr_bg = f_br_bg.unsqueeze(0), f_cr_bg.unsqueeze(0)
    n, c, hh, ww = f_br_bg.shape
    h = params.heads
    q = params.q(f_br_bg).reshape(n, h, c // h, hh * ww)
    k = params.k(f_cr_bg).reshape(n, h, c // h, hh * ww)
    v = params.v(f_cr_bg).reshape(n, h, c // h, hh * ww)
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    affinity = (q @ k.transpose(-2, -1)) * params.temperature.view(1, h, 1, 1)
    weights = affinity.softmax(dim=-1)
    if probe is not None:
        probe.channel_weights.append(weights.detach())
    out = params.out((weights @ v).reshape(n, c, hh, ww))
    return out.squeeze(0) if squeeze else out


class BoundarySensitiveAttention(nn.Module):
    """Two-branch refinement block; see module docstring."""

    def __init__(self, dim: int, spatial_heads: int = 4, channel_heads: int = 4,
                 use_spatial: bool = True, use_channel: bool = True):
        super().__init__()
        self.dim = dim
        self.spatial = SpatialCrossAttention(dim, spatial_heads)
        self.channel = ChannelCrossAttention(dim, channel_heads)
        # bias-free so the spatial term stays confined to boundary pixels
        self.proj_s = nn.Conv2d(dim, dim, 1, bias=False)
        self.proj_c = nn.Conv2d(dim, dim, 1, bias=False)
        self.use_spatial = use_spatial
        self.use_channel = use_channel

    def forward(self, x: torch.Tensor, partition: RegionPartition,
                probe: AttentionProbe | None = None, **switches) -> torch.Tensor:
        return bsa_forward(x, partition, self, probe, **switches)


def bsa_forward(
    x: torch.Tensor,
    partition: RegionPartition,
    params: BoundarySensitiveAttention,
    probe: AttentionProbe | None = None,
    use_spatial: bool | None = None,
    use_channel: bool | None = None,
) -> torch.Tensor:
    """Refine ``x`` (``C x H x W`` or batched) with both branches and the residual.

    ``use_spatial`` / ``use_channel`` override the module's branch switches for
    one call. Samples without any foreground pass through unchanged.
    """
    use_spatial = params.use_spatial if use_spatial is None else use_spatial
    use_channel = params.use_channel if use_channel is None else use_channel
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
        partition = RegionPartition(partition.boundary[None], partition.interior[None],
                                    partition.background[None], partition.iterations)
    if tuple(partition.boundary.shape) != (x.shape[0], *x.shape[-2:]):
        raise ValueError(f"partition {partition.boundary.shape} does not match features {tuple(x.shape)}")
    boundary = _region_tensor(partition.boundary, x.device)
    interior = _region_tensor(partition.interior, x.device)
    foreground = (boundary | interior).flatten(1).any(1)

    out = x
    if use_spatial:
        rows = []
        for n in range(x.shape[0]):
            f_s = torch.zeros_like(x[n])
            br = gather(x[n], boundary[n])
            if br.count:
                cr = gather(x[n], interior[n])
                f_s = scatter_add(f_s, spatial_cross_attention(br, cr, params.spatial, probe))
            rows.append(f_s)
        spatial = params.proj_s(torch.stack(rows))
        if probe is not None:
            probe.spatial_contributions.append(spatial.detach())
        out = out + spatial
    if use_channel and bool(foreground.any()):
        f_br_bg = x * (~interior).unsqueeze(1).to(x.dtype)
        f_cr_bg = x * (~boundary).unsqueeze(1).to(x.dtype)
        channel = params.proj_c(channel_cross_attention(f_br_bg, f_cr_bg, params.channel, probe))
        out = out + channel * foreground.view(-1, 1, 1, 1).to(x.dtype)
    return out.squeeze(0) if squeeze else out
