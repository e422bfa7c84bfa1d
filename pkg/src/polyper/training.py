"""Training loop, loss, ablation runner and finite-difference gradient checks."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import upsample_to_base
from .bsa import BoundarySensitiveAttention
from .config import RunConfig, parse_mode
from .data import Sample, SynthSpec, generate_synth, iterate_batches, load_folder
from .decoder import Polyper, PolyperOutput, save_checkpoint
from .metrics import EvalReport, evaluate
from .region_ops import separate_regions

log = logging.getLogger(__name__)

REFERENCE_ITERATIONS = 4
# gradients below this magnitude are compared absolutely; FD round-off is ~1e-11
GRAD_FLOOR = 1e-7


class TrainingDiverged(RuntimeError):
    pass


def dice_bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss (per image, averaged) plus binary cross-entropy."""
    target = target.to(logits.dtype)
    if target.dim() == logits.dim() - 1:
        target = target.unsqueeze(1)
    prob = torch.sigmoid(logits)
    dims = tuple(range(1, logits.dim()))
    inter = (prob * target).sum(dims)
    denom = prob.sum(dims) + target.sum(dims)
    dice = 1.0 - (2.0 * inter + 1.0) / (denom + 1.0)
    return dice.mean() + F.binary_cross_entropy_with_logits(logits, target)


def total_loss(out: PolyperOutput, masks: torch.Tensor, aux_weight: float = 0.4) -> torch.Tensor:
    aux = upsample_to_base(out.initial_logits, out.final_logits.shape[-2:])
    return dice_bce(out.final_logits, masks) + aux_weight * dice_bce(aux, masks)


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def load_datasets(config: RunConfig) -> tuple[list[Sample], list[Sample]]:
    size = config.image_size
    if config.train_images:
        train = load_folder(config.train_images, config.train_masks, size)
    else:
        train = generate_synth(SynthSpec(count=config.synth_train, image_size=size,
                                         seed=config.data_seed))
    if config.val_images:
        val = load_folder(config.val_images, config.val_masks, size)
    else:
        val = generate_synth(SynthSpec(count=config.synth_val, image_size=size,
                                       seed=config.data_seed + 10_000))
    return train, val


def make_optimizer(model: nn.Module, config: RunConfig) -> torch.optim.Optimizer:
    params = model.parameters()
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.lr, betas=tuple(config.betas),
                                 weight_decay=config.weight_decay)
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr, betas=tuple(config.betas),
                                weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.lr, momentum=config.betas[0],
                           weight_decay=config.weight_decay)


@dataclass
class TrainResult:
    config: RunConfig
    checkpoint: Path
    best_step: int
    best: EvalReport
    final: EvalReport
    history: list[dict] = field(default_factory=list)

    @property
    def best_mdice(self) -> float:
        return self.best.mDice


def train(
    config: RunConfig,
    train_set: Sequence[Sample] | None = None,
    val_set: Sequence[Sample] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Optimise a fresh model; keeps the best-by-validation-mDice checkpoint.

    Writes ``metrics.jsonl`` (one record per evaluation, no wall-clock fields, so
    equal seeds give byte-identical logs), ``loss.jsonl``, ``config.yaml``,
    ``best.npz`` and ``final_report.json`` under the run's output directory.
    """
    out_dir = config.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    config.dump(out_dir / "config.yaml")
    if train_set is None or val_set is None:
        loaded_train, loaded_val = load_datasets(config)
        train_set = loaded_train if train_set is None else train_set
        val_set = loaded_val if val_set is None else val_set
    if not train_set:
        raise ValueError("training set is empty")

    rng = seed_everything(config.seed)
    model = Polyper.from_config(config)
    model.train()
    opt = make_optimizer(model, config)
    warmup = int(config.warmup_fraction * config.steps)
    warm_mode = parse_mode("no_bsr")

    best: EvalReport | None = None
    best_step = -1
    history: list[dict] = []
    ckpt = out_dir / "best.npz"
    step = 0
    metrics_fh = open(out_dir / "metrics.jsonl", "w")
    loss_fh = open(out_dir / "loss.jsonl", "w")
    running = 0.0
    try:
        while step < config.steps:
            for images, masks in iterate_batches(train_set, config.batch_size, rng):
                mode = warm_mode if step < warmup else None
                out = model(images, mode=mode)
                loss = total_loss(out, masks, config.aux_weight)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                running += value
                if on_step is not None:
                    on_step(step, value)
                if step % 50 == 0:
                    loss_fh.write(json.dumps({"step": step, "loss": running / 50}) + "\n")
                    running = 0.0
                if step % config.eval_every == 0 or step == config.steps:
                    report = evaluate(model, val_set)
                    record = {"step": step, "val_mDice": report.mDice, "val_mIoU": report.mIoU,
                              "val_small_mDice": report.small_polyp.mDice}
                    history.append(record)
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
                    log.info("step %d val mDice %.4f mIoU %.4f", step, report.mDice, report.mIoU)
                    if best is None or report.mDice > best.mDice:
                        best, best_step = report, step
                        save_checkpoint(ckpt, model, config, {"step": step, "val_mDice": report.mDice})
                if step >= config.steps:
                    break
    finally:
        metrics_fh.close()
        loss_fh.close()
    final = evaluate(model, val_set)
    (out_dir / "final_report.json").write_text(final.to_json())
    best.write(out_dir / "best_report.json")
    return TrainResult(config, ckpt, best_step, best, final, history)


# --------------------------------------------------------------------------- ablations

@dataclass
class Variant:
    label: str
    overrides: dict


def headline_variants() -> list[Variant]:
    return [Variant("w/o BSR", {"mode": "no_bsr"}), Variant("w/o RS", {"mode": "no_rs"}),
            Variant("full", {"mode": "full"})]


def iteration_variants(values: Sequence[int] = range(1, 7)) -> list[Variant]:
    return [Variant(f"T={t}", {"mode": "full", "iterations": int(t)}) for t in values]


def branch_variants() -> list[Variant]:
    return [Variant("SA", {"mode": "spatial_only"}), Variant("CA", {"mode": "channel_only"}),
            Variant("SA+CA", {"mode": "full"})]


def stage_variants() -> list[Variant]:
    names = ["D3", "D3+D2", "D3+D2+D1", "D3+D2+D1+D0"]
    return [Variant(n, {"mode": f"stages_subset({k})"}) for k, n in enumerate(names, start=1)]


PRESETS = {
    "headline": headline_variants,
    "iterations": iteration_variants,
    "branches": branch_variants,
    "stages": stage_variants,
}


@dataclass
class AblationRow:
    label: str
    overrides: dict
    seeds: list[int]
    mDice: list[float] = field(default_factory=list)
    mIoU: list[float] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @staticmethod
    def _stat(values):
        if not values:
            return float("nan"), float("nan")
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0

    @property
    def mdice_stats(self):
        return self._stat(self.mDice)

    @property
    def miou_stats(self):
        return self._stat(self.mIoU)


@dataclass
class AblationTable:
    kind: str
    rows: list[AblationRow]

    def headers(self) -> list[str]:
        stats = ["mIoU", "mIoU_std", "mDice", "mDice_std", "seeds", "failures"]
        if self.kind == "iterations":
            return ["RS"] + [str(t) for t in range(1, 7)] + stats
        if self.kind == "branches":
            return ["SA", "CA"] + stats
        if self.kind == "stages":
            return ["D3", "D2", "D1", "D0"] + stats
        return ["variant"] + stats

    def _marks(self, row: AblationRow) -> list[str]:
        mode = parse_mode(row.overrides.get("mode", "full"))
        if self.kind == "iterations":
            t = int(row.overrides.get("iterations", 0))
            rs = "x" if mode.refine and not mode.whole_mask else ""
            return [rs] + ["x" if t == k else "" for k in range(1, 7)]
        if self.kind == "branches":
            return ["x" if mode.use_spatial else "", "x" if mode.use_channel else ""]
        if self.kind == "stages":
            return ["x" if k < mode.stages else "" for k in range(4)]
        return [row.label]

    def footer(self) -> list[str]:
        notes = []
        if self.kind == "iterations":
            notes.append(f"full-scale reference: best erosion/dilation count T = {REFERENCE_ITERATIONS}")
        delta = self.headline_delta()
        if delta is not None:
            notes.append(f"headline delta mDice(full) - mDice(w/o BSR) = {100 * delta:+.2f}")
        return notes

    def row(self, label: str) -> AblationRow | None:
        return next((r for r in self.rows if r.label == label), None)

    def headline_delta(self) -> float | None:
        full, base = self.row("full"), self.row("w/o BSR")
        if full is None or base is None or not full.mDice or not base.mDice:
            return None
        return full.mdice_stats[0] - base.mdice_stats[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.headers())
        for r in self.rows:
            (miou, miou_sd), (mdice, mdice_sd) = r.miou_stats, r.mdice_stats
            w.writerow(self._marks(r) + [f"{100 * miou:.2f}", f"{100 * miou_sd:.2f}",
                                          f"{100 * mdice:.2f}", f"{100 * mdice_sd:.2f}",
                                          len(r.mDice), len(r.errors)])
        for note in self.footer():
            w.writerow([f"# {note}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            rows.append({
                "label": r.label, "overrides": r.overrides, "seeds": r.seeds,
                "mDice": r.mDice, "mIoU": r.mIoU,
                "mDice_mean": r.mdice_stats[0], "mDice_std": r.mdice_stats[1],
                "mIoU_mean": r.miou_stats[0], "mIoU_std": r.miou_stats[1],
                "errors": r.errors,
            })
        return {"kind": self.kind, "headers": self.headers(), "rows": rows, "footer": self.footer()}

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "ablation.csv", out_dir / "ablation.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        return csv_path, json_path


def run_ablation(
    base_config: RunConfig,
    variants: Sequence[Variant] | str,
    seeds: Sequence[int],
    out_dir=None,
    trainer: Callable[[RunConfig, list, list], TrainResult] | None = None,
    kind: str | None = None,
) -> AblationTable:
    """Train and score every (variant, seed) pair on one shared dataset.

    ``variants`` is a list or a preset name (see ``PRESETS``); ``kind`` picks the
    table layout and defaults to the preset name. A failing run is recorded on
    its row and the sweep carries on.
    """
    kind = kind or (variants if isinstance(variants, str) else "custom")
    if isinstance(variants, str):
        variants = PRESETS[variants]()
    if not variants or not seeds:
        raise ValueError("need at least one variant and one seed")
    trainer = trainer or (lambda cfg, tr, va: train(cfg, tr, va))
    out_dir = Path(out_dir) if out_dir else base_config.resolved_output_dir()
    train_set, val_set = load_datasets(base_config)
    rows = []
    for v in variants:
        row = AblationRow(v.label, dict(v.overrides), list(seeds))
        for seed in seeds:
            tag = v.label.replace("/", "").replace(" ", "_").replace("+", "_").replace("=", "")
            cfg = base_config.replace(**v.overrides, seed=int(seed),
                                      output_dir=str(out_dir / f"{tag}_seed{seed}"))
            try:
                result = trainer(cfg, train_set, val_set)
            except Exception as exc:  # keep sweeping; the row records it
                log.error("variant %s seed %s failed: %s", v.label, seed, exc)
                row.errors.append(f"seed {seed}: {exc!r}\n{traceback.format_exc(limit=3)}")
                continue
            row.mDice.append(result.best.mDice)
            row.mIoU.append(result.best.mIoU)
        rows.append(row)
    table = AblationTable(kind, rows)
    table.write(out_dir)
    return table


# --------------------------------------------------------------------------- gradient checks

@dataclass
class GradCheckEntry:
    module: str
    parameter: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), GRAD_FLOOR)
        return abs(self.analytic - self.numeric) / scale


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    def max_error(self, module: str | None = None) -> float:
        errs = [e.rel_error for e in self.entries if module is None or e.module == module]
        return max(errs) if errs else 0.0

    def per_module(self) -> dict[str, float]:
        return {m: self.max_error(m) for m in dict.fromkeys(e.module for e in self.entries)}

    @property
    def passed(self) -> bool:
        return self.max_error() < self.tolerance

    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.rel_error)

    def summary(self) -> str:
        lines = [f"{m:<14} max rel error {err:.3e}" for m, err in self.per_module().items()]
        status = "PASS" if self.passed else f"FAIL (worst: {self.worst().parameter}{list(self.worst().index)})"
        lines.append(f"tolerance {self.tolerance:.0e}: {status}")
        return "\n".join(lines)


class GradCheckError(AssertionError):
    pass


def finite_difference(
    loss_fn: Callable[[], torch.Tensor],
    tensor: torch.Tensor,
    index: tuple,
    h: float = 1e-5,
) -> float:
    """Central difference of ``loss_fn`` with respect to one element of ``tensor``."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        plus = float(loss_fn())
        tensor[index] = orig - h
        minus = float(loss_fn())
        tensor[index] = orig
    return (plus - minus) / (2 * h)


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    named_tensors: Sequence[tuple[str, str, torch.Tensor]],
    samples_per_tensor: int | None,
    rng: np.random.Generator,
    tolerance: float,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd against central differences.

    ``named_tensors`` holds ``(module, name, tensor)``; every tensor must require
    grad. ``samples_per_tensor=None`` checks every element.
    """
    tensors = [t for _, _, t in named_tensors]
    if not tensors:
        raise GradCheckError("nothing to check: no parameters")
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    entries = []
    for (module, name, t), grad in zip(named_tensors, analytic):
        if samples_per_tensor is None or samples_per_tensor >= t.numel():
            flat = range(t.numel())
        else:
            flat = rng.choice(t.numel(), size=samples_per_tensor, replace=False)
        for k in flat:
            idx = tuple(int(i) for i in np.unravel_index(int(k), tuple(t.shape)))
            num = finite_difference(loss_fn, t.data, idx, h)
            entries.append(GradCheckEntry(module, name, idx, float(grad[idx]), num))
    return GradCheckReport(entries, tolerance)


def tiny_config(**overrides) -> RunConfig:
    base = dict(encoder_channels=[4, 8, 8, 8], decoder_width=8, spatial_heads=2,
                channel_heads=2, iterations=1, image_size=64)
    base.update(overrides)
    return RunConfig(**base)


def _blob_target(size: int, rng: np.random.Generator) -> torch.Tensor:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    r = rng.uniform(0.15, 0.3) * size
    return torch.from_numpy(((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)[None])


def model_gradcheck(
    config: RunConfig | None = None,
    samples: int = 20,
    seed: int = 0,
    tolerance: float = 1e-3,
    h: float = 1e-5,
) -> GradCheckReport:
    """Sampled finite-difference check of the full training loss at float64.

    The region partition is computed once and pinned: thresholding and
    morphology carry no gradient, so the check holds them fixed as well.
    """
    config = config or tiny_config()
    rng = seed_everything(seed)
    model = Polyper.from_config(config).double()
    size = config.image_size
    image = torch.rand(1, 3, size, size, dtype=torch.float64)
    target = _blob_target(size, rng)
    # a mid-sized square keeps both regions populated at any initialisation
    base = size // 4
    core = np.zeros((1, base, base), dtype=bool)
    core[:, base // 4: 3 * base // 4, base // 4: 3 * base // 4] = True
    partition = separate_regions(core, config.iterations)

    def loss_fn():
        return total_loss(model(image, partition=partition), target, config.aux_weight)

    named = [(n.split(".")[0], n, p) for n, p in model.named_parameters()]
    if not named:
        raise GradCheckError("model has no parameters")
    # spread the sample over modules, then over tensors inside each module
    modules = list(dict.fromkeys(m for m, _, _ in named))
    per_module = max(1, samples // len(modules))
    picked = []
    for m in modules:
        group = [(mm, n, p) for mm, n, p in named if mm == m]
        weights = np.array([p.numel() for _, _, p in group], dtype=np.float64)
        choice = rng.choice(len(group), size=per_module, p=weights / weights.sum())
        for j in choice:
            picked.append((group[j], int(rng.integers(group[j][2].numel()))))
    report_entries = []
    for p in model.parameters():
        p.grad = None
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for n, p in model.named_parameters()}
    for (module, name, p), k in picked:
        idx = tuple(int(i) for i in np.unravel_index(k, tuple(p.shape)))
        num = finite_difference(loss_fn, p.data, idx, h)
        report_entries.append(GradCheckEntry(module, name, idx, float(grads[name][idx]), num))
    return GradCheckReport(report_entries, tolerance)


def bsa_gradcheck(
    channels: int = 8,
    size: int = 8,
    heads: int = 2,
    seed: int = 0,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    samples_per_tensor: int | None = None,
) -> GradCheckReport:
    """Finite-difference check of one attention block and its input at float64."""
    rng = seed_everything(seed)
    block = BoundarySensitiveAttention(channels, heads, heads).double()
    x = torch.randn(1, channels, size, size, dtype=torch.float64, requires_grad=True)
    mask = np.zeros((1, size, size), dtype=bool)
    lo, hi = size // 4, size - size // 4
    mask[:, lo:hi, lo:hi] = True
    partition = separate_regions(mask, 1)
    weight = torch.randn(1, channels, size, size, dtype=torch.float64)

    def loss_fn():
        return (block(x, partition) * weight).sum()

    named = [("bsa", n, p) for n, p in block.named_parameters()] + [("bsa", "input", x)]
    return check_gradients(loss_fn, named, samples_per_tensor, rng, tolerance, h)


def gradcheck(scope: str = "full", seed: int = 0) -> GradCheckReport:
    """Run the finite-difference check; raises :class:`GradCheckError` naming the worst parameter."""
    if scope == "bsa":
        report = bsa_gradcheck(seed=seed)
    elif scope == "full":
        report = model_gradcheck(samples=40, seed=seed)
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    if not report.passed:
        worst = report.worst()
        raise GradCheckError(
            f"gradient mismatch at {worst.parameter}{list(worst.index)}: analytic {worst.analytic:.6e}"
            f" vs numeric {worst.numeric:.6e} (rel {worst.rel_error:.3e})\n{report.summary()}"
        )
    return report
