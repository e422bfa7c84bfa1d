"""Binary morphology and boundary/interior/background region separation.

Masks are boolean numpy arrays of shape ``(..., H, W)``; any leading axes are
treated as a batch and processed independently. The structuring element is the
3x3 square and pixels outside the image count as background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim < 2:
        raise ValueError(f"mask must be at least 2-D, got shape {mask.shape}")
    if mask.shape[-1] < 1 or mask.shape[-2] < 1:
        raise ValueError(f"mask must be non-empty, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def _check_iterations(iterations: int) -> int:
    if int(iterations) != iterations or iterations < 0:
        raise ValueError(f"iterations must be a non-negative integer, got {iterations!r}")
    return int(iterations)


def _step(mask: np.ndarray, reduce) -> np.ndarray:
    h, w = mask.shape[-2:]
    pad = [(0, 0)] * (mask.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(mask, pad, constant_values=False)
    out = padded[..., 1:h + 1, 1:w + 1].copy()
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            reduce(out, padded[..., dy:dy + h, dx:dx + w], out=out)
    return out


def erode(mask, iterations: int = 1) -> np.ndarray:
    """Shrink the foreground by one pixel (3x3 square) per iteration."""
    out = _as_mask(mask).copy()
    for _ in range(_check_iterations(iterations)):
        if not out.any():
            break
        out = _step(out, np.logical_and)
    return out


def dilate(mask, iterations: int = 1) -> np.ndarray:
    """Grow the foreground by one pixel (3x3 square) per iteration, clipped at the border."""
    out = _as_mask(mask).copy()
    for _ in range(_check_iterations(iterations)):
        if not out.any():
            break
        out = _step(out, np.logical_or)
    return out


@dataclass(frozen=True)
class RegionPartition:
    """Boundary band, interior core and background of a mask.

    ``boundary`` and ``interior`` drive the two attention branches. A partition
    built by :func:`separate_regions` is disjoint and exhaustive; the whole-mask
    ablation builds an overlapping one on purpose, so the invariants are checked
    on demand through :meth:`validate` rather than at construction.
    """

    boundary: np.ndarray
    interior: np.ndarray
    background: np.ndarray
    iterations: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.boundary.shape

    def __getitem__(self, index) -> "RegionPartition":
        return RegionPartition(
            self.boundary[index], self.interior[index], self.background[index], self.iterations
        )

    def __len__(self) -> int:
        return len(self.boundary)

    def validate(self, source=None) -> None:
        """Raise ``ValueError`` if the partition invariants do not hold."""
        b, i, g = self.boundary, self.interior, self.background
        if not (b.shape == i.shape == g.shape):
            raise ValueError(f"region shapes differ: {b.shape}, {i.shape}, {g.shape}")
        if (b & i).any() or (b & g).any() or (i & g).any():
            raise ValueError("regions overlap")
        if not (b | i | g).all():
            raise ValueError("regions do not cover the image")
        if source is not None:
            source = _as_mask(source)
            if (i & ~source).any():
                raise ValueError("interior leaks outside the source mask")
            if (source & ~(i | b)).any():
                raise ValueError("source mask not covered by interior and boundary")


def separate_regions(mask, iterations: int) -> RegionPartition:
    """Split ``mask`` into interior ``erode^T``, boundary ``dilate^T - interior`` and the rest.

    An empty interior is returned as is; the decoder owns the small-object fallback.
    """
    if _check_iterations(iterations) < 1:
        raise ValueError("region separation needs at least one iteration")
    mask = _as_mask(mask)
    interior = erode(mask, iterations)
    grown = dilate(mask, iterations)
    boundary = grown & ~interior
    return RegionPartition(boundary, interior, ~grown, int(iterations))


def whole_mask_partition(mask, iterations: int) -> RegionPartition:
    """Regions used when separation is disabled: queries cover ``dilate^T(mask)``, keys cover ``mask``."""
    mask = _as_mask(mask)
    grown = dilate(mask, iterations)
    return RegionPartition(grown, mask.copy(), ~grown, int(iterations))


def fallback_partition(mask, iterations: int) -> RegionPartition:
    """Separation that keeps small objects refinable.

    Where ``T`` erosions wipe out a mask, the mask itself serves as interior and
    the dilation ring around it as boundary.
    """
    mask = _as_mask(mask)
    part = separate_regions(mask, iterations)
    lead = mask.shape[:-2]
    empty = ~part.interior.reshape(*lead, -1).any(-1) if lead else np.array(not part.interior.any())
    if not empty.any():
        return part
    grown = dilate(mask, iterations)
    sel = empty[..., None, None]
    interior = np.where(sel, mask, part.interior)
    boundary = np.where(sel, grown & ~mask, part.boundary)
    return RegionPartition(boundary, interior, ~(boundary | interior), part.iterations)
