"""Image-level Dice / IoU, their means, and the small-polyp bucket."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import SMALL_POLYP_FRACTION, DataError, Sample


def dice_iou(pred, gt) -> tuple[float, float]:
    """Dice and IoU of two boolean masks; two empty masks score (1, 1)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    inter = int(np.count_nonzero(pred & gt))
    p, g = int(np.count_nonzero(pred)), int(np.count_nonzero(gt))
    if p + g == 0:
        return 1.0, 1.0
    union = p + g - inter
    return 2.0 * inter / (p + g), inter / union


@dataclass
class ImageScore:
    id: str
    dice: float
    iou: float
    gt_proportion: float


@dataclass
class Aggregate:
    count: int
    mDice: float
    mIoU: float

    @classmethod
    def over(cls, scores: Sequence[ImageScore]) -> "Aggregate":
        if not scores:
            return cls(0, float("nan"), float("nan"))
        return cls(len(scores), float(np.mean([s.dice for s in scores])),
                   float(np.mean([s.iou for s in scores])))


@dataclass
class EvalReport:
    per_image: list[ImageScore] = field(default_factory=list)

    @property
    def overall(self) -> Aggregate:
        return Aggregate.over(self.per_image)

    @property
    def small_polyp(self) -> Aggregate:
        return Aggregate.over([s for s in self.per_image if s.gt_proportion < SMALL_POLYP_FRACTION])

    @property
    def mDice(self) -> float:
        return self.overall.mDice

    @property
    def mIoU(self) -> float:
        return self.overall.mIoU

    def to_dict(self) -> dict:
        return {
            "mDice": self.mDice,
            "mIoU": self.mIoU,
            "count": len(self.per_image),
            "small_polyp": asdict(self.small_polyp),
            "small_polyp_threshold": SMALL_POLYP_FRACTION,
            "per_image": [asdict(s) for s in self.per_image],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "dice", "iou", "gt_proportion", "small_polyp"])
        for s in self.per_image:
            writer.writerow([s.id, f"{s.dice:.6f}", f"{s.iou:.6f}", f"{s.gt_proportion:.6f}",
                             int(s.gt_proportion < SMALL_POLYP_FRACTION)])
        return buf.getvalue()

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(self.to_json())
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        csv_path.write_text(self.to_csv())


def score(ids: Sequence[str], preds, gts) -> EvalReport:
    report = EvalReport()
    for sid, p, g in zip(ids, preds, gts):
        d, i = dice_iou(p, g)
        report.per_image.append(ImageScore(sid, d, i, float(np.asarray(g, dtype=bool).mean())))
    return report


@torch.no_grad()
def predict_masks(model, images: torch.Tensor, batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(images), batch_size):
        logits = model(images[start:start + batch_size].to(dtype)).final_logits
        out.append((torch.sigmoid(logits) > 0.5)[:, 0].cpu().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,), dtype=bool)


def evaluate(model, dataset: Sequence[Sample], config=None, batch_size: int = 16) -> EvalReport:
    """Score ``model`` on every sample at full input resolution."""
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    for s in dataset:
        if s.image.shape[1:] != s.mask.shape:
            raise DataError(f"{s.id}: image and mask sizes differ")
    images = torch.from_numpy(np.stack([s.image for s in dataset]))
    preds = predict_masks(model, images, batch_size)
    return score([s.id for s in dataset], preds, [s.mask for s in dataset])
