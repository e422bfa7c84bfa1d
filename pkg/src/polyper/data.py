"""Synthetic polyp-like blobs and folder ingestion of image/mask pairs."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SMALL_POLYP_FRACTION = 0.06
DEFAULT_RESOLUTION = 224


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # H x W bool
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be 3 x H x W, got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ")

    @property
    def proportion(self) -> float:
        return float(self.mask.mean())


@dataclass
class SynthSpec:
    count: int = 200
    image_size: int = 64
    blob_count: tuple = (1, 2)
    proportion: tuple = (0.01, 0.25)  # total foreground fraction per image
    blur_radius: tuple = (0.5, 2.0)  # Gaussian sigma, pixels
    contrast: tuple = (0.35, 1.0)
    noise: float = 0.06
    small_fraction: float = 0.4  # share of images drawn below the small-polyp cut
    background_level: tuple = (0.62, 0.36, 0.30)
    foreground_level: tuple = (0.85, 0.55, 0.45)
    seed: int = 0

    def __post_init__(self):
        for name in ("blob_count", "proportion", "blur_radius", "contrast",
                     "background_level", "foreground_level"):
            setattr(self, name, tuple(getattr(self, name)))
        lo, hi = self.proportion
        if not 0 < lo <= hi <= 0.5:
            raise ValueError(f"proportion range must lie within (0, 0.5], got {self.proportion}")
        if self.blur_radius[0] < 0 or self.blur_radius[0] > self.blur_radius[1]:
            raise ValueError(f"bad blur radius range {self.blur_radius}")
        if not 1 <= self.blob_count[0] <= self.blob_count[1]:
            raise ValueError(f"bad blob count range {self.blob_count}")
        if self.count < 0 or self.image_size < 8:
            raise ValueError("count must be >= 0 and image_size >= 8")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _blob_field(size: int, rng: np.random.Generator, n_blobs: int):
    """Return a function ``scale -> mask`` rendering ``n_blobs`` perturbed ellipses."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    blobs = []
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.25, 0.75, size=2) * size
        aspect = rng.uniform(0.65, 1.0)
        theta = rng.uniform(0, math.pi)
        harmonics = [(k, rng.uniform(0, 0.12), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 5)]
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / aspect
        rho = np.hypot(u, v)
        phi = np.arctan2(v, u)
        wobble = 1.0 + sum(a * np.cos(k * phi + p) for k, a, p in harmonics)
        blobs.append(rho / wobble)

    def render(radius: float) -> np.ndarray:
        out = np.zeros((size, size), dtype=bool)
        for r in blobs:
            out |= r <= radius
        return out

    return render


def _render_mask(size: int, target: float, rng: np.random.Generator, n_blobs: int) -> np.ndarray:
    render = _blob_field(size, rng, n_blobs)
    lo, hi = 0.0, float(size)
    goal = target * size * size
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if render(mid).sum() < goal:
            lo = mid
        else:
            hi = mid
    below, above = render(lo), render(hi)
    mask = above if abs(above.sum() - goal) <= abs(below.sum() - goal) else below
    if not mask.any():
        mask = above
    return mask


def _texture(size: int, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    coarse = ndimage.gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 3, 3))
    coarse /= coarse.std() + 1e-12
    fine = rng.standard_normal((3, size, size))
    return amplitude * (0.7 * coarse + 0.3 * fine)


def _target_proportions(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.proportion
    cut = SMALL_POLYP_FRACTION
    if hi < cut:
        return rng.uniform(lo, hi, spec.count)
    if lo >= cut:
        return rng.uniform(lo, hi, spec.count)
    n_small = math.ceil(spec.small_fraction * spec.count)
    small = rng.uniform(lo, min(hi, cut * 0.9), n_small)
    large = rng.uniform(cut, hi, spec.count - n_small)
    out = np.concatenate([small, large])
    rng.shuffle(out)
    return out


def render_sample(spec: SynthSpec, rng: np.random.Generator, target: float, sample_id: str) -> Sample:
    size = spec.image_size
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    mask = _render_mask(size, target, rng, n_blobs)
    sigma = rng.uniform(*spec.blur_radius)
    contrast = rng.uniform(*spec.contrast)
    soft = mask.astype(np.float64)
    if sigma > 0:
        soft = ndimage.gaussian_filter(soft, sigma=sigma)
    bg = np.asarray(spec.background_level, dtype=np.float64)[:, None, None]
    fg = np.asarray(spec.foreground_level, dtype=np.float64)[:, None, None]
    image = bg + contrast * (fg - bg) * soft[None]
    if spec.noise > 0:
        image = image + _texture(size, rng, spec.noise)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask, sample_id)


def generate_synth(spec: SynthSpec) -> list[Sample]:
    """Render ``spec.count`` samples; the same spec always yields the same dataset."""
    rng = np.random.default_rng(spec.seed)
    targets = _target_proportions(spec, rng)
    return [render_sample(spec, rng, float(t), f"synth_{i:05d}") for i, t in enumerate(targets)]


def _find_mask(masks_dir: Path, stem: str) -> Path | None:
    for suffix in (".png",) + IMAGE_SUFFIXES:
        candidate = masks_dir / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def load_pair(image_path: Path, mask_path: Path, size: int | None = DEFAULT_RESOLUTION) -> Sample:
    try:
        with Image.open(image_path) as im:
            image = im.convert("RGB")
            image.load()
    except Exception as exc:
        raise DataError(f"cannot read image {image_path}: {exc}") from exc
    try:
        with Image.open(mask_path) as im:
            mask = im.convert("L")
            mask.load()
    except Exception as exc:
        raise DataError(f"cannot read mask {mask_path}: {exc}") from exc
    if image.size != mask.size:
        raise DataError(f"size mismatch: {image_path} is {image.size}, {mask_path} is {mask.size}")
    if size is not None and image.size != (size, size):
        image = image.resize((size, size), Image.BILINEAR)
        mask = mask.resize((size, size), Image.NEAREST)
    arr = np.asarray(image, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return Sample(arr, np.asarray(mask) >= 128, image_path.stem)


def load_folder(images_dir, masks_dir, size: int | None = DEFAULT_RESOLUTION) -> list[Sample]:
    """Load every image in ``images_dir`` with its same-stem mask from ``masks_dir``."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    samples = []
    for path in sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        mask_path = _find_mask(masks_dir, path.stem)
        if mask_path is None:
            raise DataError(f"no mask for {path} in {masks_dir}")
        samples.append(load_pair(path, mask_path, size))
    return samples


def save_folder(samples: Sequence[Sample], root, spec: SynthSpec | None = None) -> Path:
    """Write ``images/<id>.png`` and ``masks/<id>.png`` (0/255), plus ``manifest.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8) * 255, "L").save(root / "masks" / f"{s.id}.png")
    manifest = {"count": len(samples), "ids": [s.id for s in samples]}
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def stack(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    masks = torch.from_numpy(np.stack([s.mask for s in samples]))
    return images, masks


def iterate_batches(
    samples: Sequence[Sample], batch_size: int, rng: np.random.Generator, augment: bool = True
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """One shuffled epoch of ``(images, masks)`` batches with seeded random flips."""
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = np.stack([samples[i].image for i in idx])
        masks = np.stack([samples[i].mask for i in idx])
        if augment:
            hflip = rng.random(len(idx)) < 0.5
            vflip = rng.random(len(idx)) < 0.5
            images[hflip] = images[hflip, :, :, ::-1]
            masks[hflip] = masks[hflip, :, ::-1]
            images[vflip] = images[vflip, :, ::-1, :]
            masks[vflip] = masks[vflip, ::-1, :]
        yield torch.from_numpy(np.ascontiguousarray(images)), torch.from_numpy(np.ascontiguousarray(masks))
