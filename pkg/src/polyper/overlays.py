"""Qualitative outputs: overlays, region maps and per-stage activation heatmaps.

For every sample five PNGs are written:

``<id>_input.png``      the input image
``<id>_gt.png``         ground truth blended in green
``<id>_pred.png``       prediction blended in red (pixel-identical to the input
                        when the prediction is empty; the PNG ``legend`` text
                        chunk then says so)
``<id>_partition.png``  regions at decoder resolution: boundary red, interior
                        green, background black (interior drawn last)
``<id>_stages.png``     channel-mean activation of each refined stage
                        (F_3 .. F_0, or D_3 .. D_0 without refinement), side by side
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .data import Sample
from .decoder import Polyper, load_checkpoint
from .region_ops import RegionPartition

SUFFIXES = ("input", "gt", "pred", "partition", "stages")
BOUNDARY_RGB = (255, 0, 0)
INTERIOR_RGB = (0, 255, 0)
BACKGROUND_RGB = (0, 0, 0)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)


def blend(rgb: np.ndarray, mask: np.ndarray, color, alpha: float = 0.5) -> np.ndarray:
    out = rgb.astype(np.float64)
    out[mask] = (1 - alpha) * out[mask] + alpha * np.asarray(color, dtype=np.float64)
    return np.round(out).astype(np.uint8)


def render_partition(partition: RegionPartition) -> np.ndarray:
    out = np.zeros((*partition.boundary.shape, 3), dtype=np.uint8)
    out[:] = BACKGROUND_RGB
    out[partition.boundary] = BOUNDARY_RGB
    out[partition.interior] = INTERIOR_RGB
    return out


def stage_heatmaps(stages: Sequence[torch.Tensor]) -> np.ndarray:
    panels = []
    for f in stages:
        m = f.detach().double().mean(0).numpy()
        lo, hi = m.min(), m.max()
        m = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        panels.append(np.round(m * 255).astype(np.uint8))
    return np.concatenate(panels, axis=1)


def _save(array: np.ndarray, path: Path, legend: str) -> Path:
    info = PngInfo()
    info.add_text("legend", legend)
    Image.fromarray(array).save(path, pnginfo=info)
    return path


@torch.no_grad()
def emit_overlays(checkpoint, dataset: Sequence[Sample], out_dir) -> list[Path]:
    """Write the five per-sample PNGs for every sample; ``checkpoint`` is a path or a model."""
    model: Polyper = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, Path)) else checkpoint
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    written: list[Path] = []
    for s in dataset:
        out = model(torch.from_numpy(s.image)[None].to(dtype))
        pred = (torch.sigmoid(out.final_logits[0, 0]) > 0.5).numpy()
        rgb = _to_uint8(s.image)
        stages = out.refined_stages or tuple(reversed(out.aggregated.d_stages))
        stage_names = "F3,F2,F1,F0" if out.refined_stages else "D3,D2,D1,D0"
        pred_legend = "prediction (red)" if pred.any() else "prediction: empty mask"
        files = [
            (rgb, "input"),
            (blend(rgb, s.mask, (0, 255, 0)), "ground truth (green)"),
            (blend(rgb, pred, (255, 0, 0)), pred_legend),
            (render_partition(out.partition[0]), "boundary red, interior green, background black"),
            (stage_heatmaps([f[0] for f in stages]), f"channel-mean activation {stage_names}"),
        ]
        for (array, legend), suffix in zip(files, SUFFIXES):
            path = out_dir / f"{s.id}_{suffix}.png"
            try:
                written.append(_save(array, path, legend))
            except OSError as exc:
                raise OSError(f"failed to write {path}: {exc}") from exc
    return written
