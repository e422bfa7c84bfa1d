"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest
import torch

from conftest import random_masks
from oracles import dense_masked_attention_oracle, dense_spatial_branch, morphology_oracle
from polyper.bsa import (
    AttentionProbe,
    BoundarySensitiveAttention,
    bsa_forward,
    gather,
    spatial_cross_attention,
)
from polyper.config import RunConfig
from polyper.metrics import EvalReport, ImageScore, dice_iou, score
from polyper.region_ops import dilate, erode, fallback_partition, separate_regions
from polyper.training import gradcheck, iteration_variants, run_ablation, train

TINY = dict(encoder_channels=[4, 8, 8, 8], decoder_width=8, spatial_heads=2, channel_heads=2,
            iterations=1, batch_size=4, synth_train=8, synth_val=4)

# desk-scale sign test: one fixed config for every variant and seed
DESK = dict(lr=1e-3, steps=1500, eval_every=250, synth_train=200, synth_val=50, image_size=64)
DESK_SEEDS = (0, 1, 2)


def blob_partition(rng, size, t):
    mask = np.zeros((size, size), bool)
    h, w = rng.integers(1, size + 1, 2)
    r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    mask[r:r + h, c:c + w] = True
    mask |= rng.random((size, size)) < 0.1
    return separate_regions(mask, t)


def random_block(rng, channels, heads):
    block = BoundarySensitiveAttention(channels, heads, heads).double()
    with torch.no_grad():
        block.channel.log_temperature.uniform_(-0.5, 0.5)
    return block


def test_c01_morphology_oracle(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    mismatches = 0
    for mask in random_masks(rng, 200):
        for t in range(1, 5):
            ero, dil = morphology_oracle(mask, t, "erode"), morphology_oracle(mask, t, "dilate")
            part = separate_regions(mask, t)
            mismatches += not np.array_equal(erode(mask, t), ero)
            mismatches += not np.array_equal(dilate(mask, t), dil)
            mismatches += not np.array_equal(part.interior, ero)
            mismatches += not np.array_equal(part.boundary, dil & ~ero)
            mismatches += not np.array_equal(part.background, ~dil)
    elapsed = time.perf_counter() - start
    criterion(1, "morphology matches oracle", mismatches == 0 and elapsed < 10,
              f"{mismatches} mismatches, {elapsed:.2f}s incl. oracle")


def test_c02_partition_invariants(criterion):
    rng = np.random.default_rng(2)
    violations = 0
    for k, mask in enumerate(random_masks(rng, 200)):
        t = 1 + k % 4
        for part in (separate_regions(mask, t), fallback_partition(mask, t)):
            b, i, g = part.boundary, part.interior, part.background
            violations += bool((b & i).any() or (b & g).any() or (i & g).any())
            violations += not (b | i | g).all()
        ero, dil = erode(mask, t), dilate(mask, t)
        violations += bool((ero & ~mask).any() or (mask & ~dil).any())
    criterion(2, "partition disjoint, exhaustive, erode <= mask <= dilate", violations == 0,
              f"{violations} violations")


def test_c03_bsa_dense_oracle(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        c = int(rng.choice([2, 4, 6, 8]))
        heads = int(rng.choice([h for h in (1, 2, 4) if c % h == 0]))
        size = int(rng.integers(2, 17))
        block = random_block(rng, c, heads)
        x = torch.randn(c, size, size, dtype=torch.float64)
        part = blob_partition(rng, size, int(rng.integers(1, 4)))
        with torch.no_grad():
            out = bsa_forward(x, part, block).numpy()
        worst = max(worst, float(np.abs(out - dense_masked_attention_oracle(x.numpy(), part, block)).max()))
    criterion(3, "BSA matches dense masked attention", worst < 1e-5, f"max abs {worst:.2e}")


def test_c04_gradcheck(criterion):
    start = time.perf_counter()
    bsa = gradcheck("bsa").max_error()
    full = gradcheck("full").max_error()
    elapsed = time.perf_counter() - start
    criterion(4, "finite-difference gradients", bsa < 1e-4 and full < 1e-3 and elapsed < 120,
              f"BSA {bsa:.2e}, full model {full:.2e}, {elapsed:.1f}s")


def test_c05_spatial_locality(criterion):
    rng = np.random.default_rng(5)
    leaks = 0
    for _ in range(50):
        c = int(rng.choice([4, 8]))
        size = int(rng.integers(4, 17))
        block = random_block(rng, c, 2)
        x = torch.randn(c, size, size, dtype=torch.float64)
        part = blob_partition(rng, size, int(rng.integers(1, 4)))
        probe = AttentionProbe()
        with torch.no_grad():
            block(x, part, probe)
        contrib = probe.spatial_contributions[0][0]
        outside = contrib[:, ~torch.from_numpy(part.boundary)]
        leaks += int(torch.count_nonzero(outside))
        np.testing.assert_allclose(contrib.numpy(), dense_spatial_branch(x.numpy(), part.boundary,
                                                                         part.interior, block), atol=1e-10)
    criterion(5, "spatial contribution zero off the boundary", leaks == 0, f"{leaks} nonzero entries")


def test_c06_key_permutation(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        block = BoundarySensitiveAttention(8, 4, 4)
        x = torch.randn(8, 16, 16)
        part = blob_partition(rng, 16, 1)
        if not part.interior.any() or not part.boundary.any():
            continue
        br = gather(x, torch.from_numpy(part.boundary))
        cr = gather(x, torch.from_numpy(part.interior))
        perm = torch.from_numpy(rng.permutation(cr.count))
        shuffled = type(cr)(cr.positions[perm], cr.features[perm])
        with torch.no_grad():
            a = spatial_cross_attention(br, cr, block.spatial).features
            b = spatial_cross_attention(br, shuffled, block.spatial).features
        worst = max(worst, float((a - b).abs().max()))
    criterion(6, "interior row order does not matter", worst < 1e-6, f"max abs {worst:.2e}")


def test_c07_cost_contract(criterion):
    ok, details = True, []
    for size, side in ((32, 6), (48, 8), (64, 10)):
        mask = np.zeros((size, size), bool)
        lo = size // 2 - side // 2
        mask[lo:lo + side, lo:lo + side] = True
        part = separate_regions(mask, 1)
        b, m, hw = int(part.boundary.sum()), int(part.interior.sum()), size * size
        block = BoundarySensitiveAttention(8, 4, 4)
        probe = AttentionProbe()
        with torch.no_grad():
            block(torch.randn(8, size, size), part, probe)
        ok &= b * m <= 0.02 * hw ** 2
        ok &= probe.spatial_score_shapes == [(4, b, m)]
        ok &= probe.spatial_score_elements == 4 * b * m < hw ** 2
        details.append(f"{size}px: B*M={b * m} vs (HW)^2={hw ** 2}")
    criterion(7, "score matrix is B x M per head", ok, "; ".join(details))


@pytest.mark.slow
def test_c08_desk_ablation_sign(criterion, tmp_path):
    start = time.perf_counter()
    base = RunConfig(**DESK)
    table = run_ablation(base, "headline", DESK_SEEDS, out_dir=tmp_path)
    elapsed = time.perf_counter() - start
    full = table.row("full").mdice_stats[0]
    no_bsr = table.row("w/o BSR").mdice_stats[0]
    no_rs = table.row("w/o RS").mdice_stats[0]
    failures = sum(len(r.errors) for r in table.rows)
    print(table.to_csv())
    ok = failures == 0 and full > no_bsr and full >= no_rs and elapsed <= 30 * 60
    criterion(8, "desk ablation: full > w/o BSR and full >= w/o RS", ok,
              f"mDice full {full:.4f}, w/o BSR {no_bsr:.4f}, w/o RS {no_rs:.4f}, "
              f"{elapsed / 60:.1f} min")


def test_c09_iteration_sweep_table(criterion, tmp_path):
    base = RunConfig(**TINY, steps=4, eval_every=4)
    table = run_ablation(base, iteration_variants(range(1, 7)), [0], out_dir=tmp_path, kind="iterations")
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    body = [l for l in lines[1:] if not l.startswith("#")]
    marks = [l.split(",")[1:7] for l in body]
    ok = (lines[0].split(",")[:7] == ["RS", "1", "2", "3", "4", "5", "6"]
          and len(body) == 6
          and all(m.count("x") == 1 and m[k] == "x" for k, m in enumerate(marks))
          and any("T = 4" in l for l in lines[7:])
          and all(not r.errors for r in table.rows))
    criterion(9, "T sweep gives six-row table with headers and reference footer", ok,
              f"{len(body)} rows")


def test_c10_metrics(criterion):
    p = np.zeros((4, 4), bool)
    g = np.zeros((4, 4), bool)
    p[0, :] = True
    g[0, 2:] = True
    g[1, :2] = True
    same = np.zeros((4, 4), bool)
    same[1:3, 1:3] = True
    empty = np.zeros((4, 4), bool)
    examples = (dice_iou(same, same) == (1.0, 1.0)
                and dice_iou(p, g) == (0.5, 1 / 3)
                and dice_iou(empty, empty) == (1.0, 1.0))

    gts, ids = [], []
    for k, frac in enumerate([0.0, 0.01, 0.04, 0.0599, 0.06, 0.0601, 0.3]):
        m = np.zeros(10_000, bool)
        m[: int(round(frac * 10_000))] = True
        gts.append(m.reshape(100, 100))
        ids.append(f"img{k}")
    report = score(ids, gts, gts)
    expected = {i for i, m in zip(ids, gts) if m.mean() < 0.06}
    bucket = {s.id for s in report.per_image if s.gt_proportion < 0.06}
    two = EvalReport([ImageScore("a", 1.0, 1.0, 0.5), ImageScore("b", 0.5, 0.4, 0.5)])
    ok = examples and bucket == expected and report.small_polyp.count == len(expected) and two.mDice == 0.75
    criterion(10, "metric examples and small-polyp bucket", ok, f"bucket {sorted(bucket)}")


def test_c11_determinism(criterion, tmp_path):
    logs = []
    for name in ("a", "b"):
        cfg = RunConfig(steps=30, eval_every=10, synth_train=32, synth_val=8, output_dir=str(tmp_path / name))
        train(cfg)
        logs.append((tmp_path / name / "metrics.jsonl").read_bytes())
    criterion(11, "seeded runs give byte-identical metric logs", logs[0] == logs[1] and len(logs[0]) > 0,
              f"{len(logs[0])} bytes")
