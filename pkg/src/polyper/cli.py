"""Command-line entry point (``polyper <subcommand>``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .config import RunConfig
from .data import SynthSpec, generate_synth, load_folder, save_folder
from .decoder import load_checkpoint
from .metrics import evaluate
from .overlays import emit_overlays
from .region_ops import separate_regions
from .training import PRESETS, GradCheckError, gradcheck, iteration_variants, run_ablation, train


def _load_config(path: str | None, overrides: list[str]) -> RunConfig:
    data = {}
    if path:
        data = RunConfig.load(path).to_dict()
    for item in overrides:
        key, _, value = item.partition("=")
        data[key.strip()] = yaml.safe_load(value)
    return RunConfig.from_dict(data)


def _data_dirs(root: str) -> tuple[Path, Path]:
    root = Path(root)
    return root / "images", root / "masks"


def cmd_train(args) -> int:
    config = _load_config(args.config, args.set)
    result = train(config)
    print(f"best val mDice {result.best.mDice:.4f} mIoU {result.best.mIoU:.4f} at step {result.best_step}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, config, _ = load_checkpoint(args.checkpoint)
    images, masks = _data_dirs(args.data)
    dataset = load_folder(images, masks, size=args.size or config.image_size)
    report = evaluate(model, dataset, config)
    report.write(args.report)
    print(f"mDice {report.mDice:.4f} mIoU {report.mIoU:.4f} "
          f"(small polyps: {report.small_polyp.count} images, mDice {report.small_polyp.mDice:.4f})")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config, args.set)
    if args.iterations:
        variants = iteration_variants([int(t) for t in args.iterations.split(",")])
        kind = "iterations"
    else:
        variants, kind = args.variants, args.variants
    seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    out = Path(args.out) if args.out else config.resolved_output_dir()
    table = run_ablation(config, variants, seeds, out_dir=out, kind=kind)
    print(table.to_csv(), end="")
    print(f"written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        report = gradcheck(args.scope, seed=args.seed)
    except GradCheckError as exc:
        print(exc, file=sys.stderr)
        return 1
    print(report.summary())
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(count=args.count, image_size=args.size, seed=args.seed,
                     proportion=(args.min_proportion, args.max_proportion))
    root = save_folder(generate_synth(spec), args.out, spec)
    print(f"wrote {spec.count} samples to {root}")
    return 0


def cmd_separate(args) -> int:
    with Image.open(args.mask) as im:
        mask = np.asarray(im.convert("L")) >= 128
    part = separate_regions(mask, args.iterations)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("boundary", "interior", "background"):
        Image.fromarray(getattr(part, name).astype(np.uint8) * 255, "L").save(out / f"{name}.png")
    print(json.dumps({n: int(getattr(part, n).sum()) for n in ("boundary", "interior", "background")}))
    return 0


def cmd_overlays(args) -> int:
    model, config, _ = load_checkpoint(args.checkpoint)
    images, masks = _data_dirs(args.data)
    dataset = load_folder(images, masks, size=args.size or config.image_size)
    if args.limit:
        dataset = dataset[: args.limit]
    paths = emit_overlays(model, dataset, args.out_dir)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyper", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        return p

    p = with_config(sub.add_parser("train", help="train one model"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on an images/ + masks/ folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory holding images/ and masks/")
    p.add_argument("--report", required=True, help="output JSON path (CSV written alongside)")
    p.add_argument("--size", type=int, help="resize target (default: the checkpoint's image_size)")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="train and tabulate model variants over seeds"))
    p.add_argument("--variants", choices=sorted(PRESETS), default="headline")
    p.add_argument("--iterations", help="comma-separated T values, e.g. 1,2,3,4,5,6")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check at float64")
    p.add_argument("--scope", choices=("full", "bsa"), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="write a synthetic images/ + masks/ dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-proportion", type=float, default=0.01)
    p.add_argument("--max-proportion", type=float, default=0.25)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("separate-regions", help="split a binary mask PNG into three region PNGs")
    p.add_argument("--mask", required=True)
    p.add_argument("--iterations", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("overlays", help="write qualitative overlays for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_overlays)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
