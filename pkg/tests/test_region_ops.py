import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_masks
from oracles import morphology_oracle
from polyper.region_ops import (
    RegionPartition,
    dilate,
    erode,
    fallback_partition,
    separate_regions,
    whole_mask_partition,
)

masks = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda hw: arrays(np.bool_, hw)
)


def block(size, inner):
    m = np.zeros((size, size), dtype=bool)
    lo = (size - inner) // 2
    m[lo:lo + inner, lo:lo + inner] = True
    return m


def test_erode_full_5x5_keeps_center_3x3():
    out = erode(np.ones((5, 5), bool), 1)
    np.testing.assert_array_equal(out, block(5, 3))


def test_erode_zero_iterations_is_identity(rng):
    m = rng.random((7, 9)) < 0.5
    np.testing.assert_array_equal(erode(m, 0), m)
    np.testing.assert_array_equal(dilate(m, 0), m)


def test_erode_5x5_block_twice_leaves_center_pixel():
    out = erode(block(9, 5), 2)
    expected = np.zeros((9, 9), bool)
    expected[4, 4] = True
    np.testing.assert_array_equal(out, expected)


def test_dilate_center_pixel_gives_3x3():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    np.testing.assert_array_equal(dilate(m, 1), block(5, 3))


def test_dilate_empty_and_saturated():
    assert not dilate(np.zeros((6, 4), bool), 5).any()
    assert dilate(np.ones((5, 5), bool), 3).all()


def test_negative_iterations_rejected():
    with pytest.raises(ValueError):
        erode(np.ones((3, 3), bool), -1)
    with pytest.raises(ValueError):
        separate_regions(np.ones((3, 3), bool), 0)


def test_separate_regions_block_t1():
    part = separate_regions(block(9, 5), 1)
    np.testing.assert_array_equal(part.interior, block(9, 3))
    ring = block(9, 7) & ~block(9, 3)
    np.testing.assert_array_equal(part.boundary, ring)
    assert part.boundary.sum() == 40
    np.testing.assert_array_equal(part.background, ~block(9, 7))
    part.validate(block(9, 5))


def test_separate_regions_empty_mask():
    part = separate_regions(np.zeros((8, 8), bool), 4)
    assert not part.interior.any() and not part.boundary.any()
    assert part.background.all()


def test_separate_regions_full_mask_t4():
    part = separate_regions(np.ones((12, 10), bool), 4)
    rows, cols = np.mgrid[0:12, 0:10]
    # Chebyshev distance to the outside of the image
    dist = np.minimum.reduce([rows + 1, cols + 1, 12 - rows, 10 - cols])
    np.testing.assert_array_equal(part.interior, dist > 4)
    np.testing.assert_array_equal(part.boundary, dist <= 4)
    assert not part.background.any()


def test_brute_force_equivalence(rng):
    for m in random_masks(rng, 60):
        for t in range(1, 5):
            np.testing.assert_array_equal(erode(m, t), morphology_oracle(m, t, "erode"))
            np.testing.assert_array_equal(dilate(m, t), morphology_oracle(m, t, "dilate"))


def test_batched_masks_match_per_image(rng):
    stack = rng.random((5, 11, 13)) < 0.6
    out = erode(stack, 2)
    for k in range(5):
        np.testing.assert_array_equal(out[k], erode(stack[k], 2))
    part = separate_regions(stack, 2)
    np.testing.assert_array_equal(part[3].boundary, separate_regions(stack[3], 2).boundary)


@settings(max_examples=150, deadline=None)
@given(m=masks, t=st.integers(1, 4))
def test_partition_invariants(m, t):
    part = separate_regions(m, t)
    part.validate(m)
    assert (erode(m, t) <= m).all() and (m <= dilate(m, t)).all()


@settings(max_examples=100, deadline=None)
@given(m=masks, a=st.integers(0, 3), b=st.integers(0, 3))
def test_iterations_compose_additively(m, a, b):
    np.testing.assert_array_equal(erode(erode(m, a), b), erode(m, a + b))
    np.testing.assert_array_equal(dilate(dilate(m, a), b), dilate(m, a + b))


@settings(max_examples=100, deadline=None)
@given(m=masks, t=st.integers(1, 3), data=st.data())
def test_monotonicity(m, t, data):
    extra = data.draw(arrays(np.bool_, m.shape))
    bigger = m | extra
    assert (erode(m, t) <= erode(bigger, t)).all()
    assert (dilate(m, t) <= dilate(bigger, t)).all()


def _dilate_one_padded(m):
    # dilation whose outside is foreground, the dual of zero-padded erosion
    p = np.pad(m, 1, constant_values=True)
    h, w = m.shape
    return np.logical_or.reduce([p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)])


def test_duality(rng):
    for m in random_masks(rng, 40, max_size=12):
        for t in range(1, 4):
            grown = ~m
            for _ in range(t):
                grown = _dilate_one_padded(grown)
            np.testing.assert_array_equal(erode(m, t), ~grown)
            np.testing.assert_array_equal(~morphology_oracle(m, t, "erode"), grown)
        # interior-only duality holds with the plain operators away from the border
        inner = np.pad(m, 4)
        np.testing.assert_array_equal(erode(inner, 2)[4:-4, 4:-4], (~dilate(~inner, 2))[4:-4, 4:-4])


def test_partition_validate_catches_overlap():
    m = block(9, 5)
    bad = whole_mask_partition(m, 1)
    with pytest.raises(ValueError):
        bad.validate()


def test_whole_mask_partition_regions():
    m = block(9, 5)
    part = whole_mask_partition(m, 1)
    np.testing.assert_array_equal(part.interior, m)
    np.testing.assert_array_equal(part.boundary, block(9, 7))


def test_fallback_keeps_small_objects():
    m = np.zeros((2, 12, 12), bool)
    m[0, 5:7, 5:7] = True  # vanishes after 2 erosions
    m[1] = block(12, 8)
    part = fallback_partition(m, 2)
    np.testing.assert_array_equal(part.interior[0], m[0])
    np.testing.assert_array_equal(part.boundary[0], dilate(m[0], 2) & ~m[0])
    regular = separate_regions(m[1], 2)
    np.testing.assert_array_equal(part.interior[1], regular.interior)
    np.testing.assert_array_equal(part.boundary[1], regular.boundary)
    for k in range(2):
        part[k].validate(m[k])


def test_partition_is_frozen():
    part = separate_regions(block(5, 3), 1)
    assert isinstance(part, RegionPartition)
    with pytest.raises(Exception):
        part.iterations = 3
