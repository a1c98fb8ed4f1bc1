import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_hd95
from segcal.segmetrics import (
    EmptySegmentError,
    EmptySegmentWarning,
    dice_coefficient,
    dilated_bounding_box,
    hausdorff95,
    union_foreground_box,
)
from segcal.volume import GridMeta, LabelVolume


def labels(arr, spacing=(1.0, 1.0, 1.0), k=2):
    arr = np.asarray(arr, dtype=np.uint8)
    nz, ny, nx = arr.shape
    return LabelVolume(GridMeta((nx, ny, nz), spacing), k, arr)


def random_mask_pair(rng, shape=(3, 10, 10), density=0.15):
    a = rng.random(shape) < density
    b = rng.random(shape) < density
    a.flat[rng.integers(a.size)] = True
    b.flat[rng.integers(b.size)] = True
    return a, b


class TestDice:
    def test_identical(self):
        y = labels([[[0, 1], [1, 1]]])
        assert dice_coefficient(y, y, 1) == 1.0

    def test_disjoint(self):
        assert dice_coefficient(labels([[[1, 0]]]), labels([[[0, 1]]]), 1) == 0.0

    def test_shifted_square(self):
        a = np.zeros((1, 4, 4), np.uint8)
        b = np.zeros((1, 4, 4), np.uint8)
        a[0, 1:3, 0:2] = 1
        b[0, 1:3, 1:3] = 1
        assert dice_coefficient(labels(a), labels(b), 1) == 0.5

    def test_both_empty_is_undefined(self):
        y = labels(np.zeros((1, 2, 2)))
        assert dice_coefficient(y, y, 1) is None

    def test_empty_prediction_is_zero(self):
        assert dice_coefficient(labels(np.zeros((1, 1, 2))), labels([[[0, 1]]]), 1) == 0.0

    def test_background_class_rejected(self):
        y = labels([[[0, 1]]])
        with pytest.raises(ValueError):
            dice_coefficient(y, y, 0)

    def test_meta_mismatch(self):
        with pytest.raises(ValueError):
            dice_coefficient(labels([[[0, 1]]]), labels([[[0, 1]]], spacing=(2, 1, 1)), 1)


class TestHausdorff:
    def test_identical(self):
        y = labels([[[0, 1], [1, 1]]])
        assert hausdorff95(y, y, 1) == 0.0

    def test_along_z_with_thick_slices(self):
        a = np.zeros((4, 1, 1), np.uint8)
        b = np.zeros((4, 1, 1), np.uint8)
        a[0] = 1
        b[3] = 1
        assert hausdorff95(labels(a, (1, 1, 2)), labels(b, (1, 1, 2)), 1) == 6.0

    def test_empty_segment_warns(self):
        with pytest.warns(EmptySegmentWarning):
            assert hausdorff95(labels(np.zeros((1, 1, 2))), labels([[[0, 1]]]), 1) is None

    def test_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a, b = random_mask_pair(rng)
            spacing = tuple(float(s) for s in rng.uniform(0.4, 3.0, size=3))
            got = hausdorff95(labels(a, spacing), labels(b, spacing), 1)
            assert got == pytest.approx(brute_hd95(a, b, spacing), abs=1e-9)

    def test_symmetric_and_below_max(self, rng):
        a, b = random_mask_pair(rng)
        ya, yb = labels(a), labels(b)
        h = hausdorff95(ya, yb, 1)
        assert h == hausdorff95(yb, ya, 1)
        d_max = max(min(math.dist(p, q) for q in np.argwhere(b)) for p in np.argwhere(a))
        d_max = max(d_max, max(min(math.dist(p, q) for q in np.argwhere(a)) for p in np.argwhere(b)))
        assert h <= d_max + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), power=st.integers(-3, 3))
    def test_spacing_scaling(self, seed, power):
        rng = np.random.default_rng(seed)
        a, b = random_mask_pair(rng, (2, 6, 6))
        c = 2.0 ** power
        base = (0.7, 1.1, 2.5)
        h1 = hausdorff95(labels(a, base), labels(b, base), 1)
        h2 = hausdorff95(labels(a, tuple(c * s for s in base)), labels(b, tuple(c * s for s in base)), 1)
        assert h2 == pytest.approx(c * h1, rel=1e-12)
        assert dice_coefficient(labels(a), labels(b), 1) == dice_coefficient(labels(a, base), labels(b, base), 1)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_traversal_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask_pair(rng, (1, 6, 6))
        # transposing in-plane axes with isotropic spacing permutes voxels, preserving distances
        at, bt = a.transpose(0, 2, 1), b.transpose(0, 2, 1)
        assert hausdorff95(labels(a), labels(b), 1) == pytest.approx(
            hausdorff95(labels(at), labels(bt), 1), abs=1e-12)
        assert dice_coefficient(labels(a), labels(b), 1) == dice_coefficient(labels(at), labels(bt), 1)


def index_box(seg, pads):
    """Independent box arithmetic: per-axis min/max over argwhere, padded and clipped."""
    pts = np.argwhere(seg)
    lo = np.maximum(pts.min(0) - pads, 0)
    hi = np.minimum(pts.max(0) + pads, np.array(seg.shape) - 1)
    out = np.zeros(seg.shape, bool)
    out[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
    return out


class TestBoxes:
    def test_single_center_voxel(self):
        arr = np.zeros((9, 31, 31), np.uint8)
        arr[4, 15, 15] = 1
        box = dilated_bounding_box(labels(arr), 1).mask
        zs, ys, xs = np.nonzero(box)
        assert (np.ptp(xs) + 1, np.ptp(ys) + 1, np.ptp(zs) + 1) == (17, 17, 5)
        assert box.sum() == 17 * 17 * 5

    def test_clipped_at_face(self):
        arr = np.zeros((1, 5, 20), np.uint8)
        arr[0, 2, 0] = 1
        box = dilated_bounding_box(labels(arr), 1).mask
        assert box[0, 2, :9].all() and not box[0, 2, 9:].any()

    def test_anisotropic_spacing(self):
        arr = np.zeros((7, 40, 40), np.uint8)
        arr[3, 20, 20] = 1
        y = labels(arr, (0.5, 0.5, 2.0))
        box = dilated_bounding_box(y, 1).mask
        np.testing.assert_array_equal(box, index_box(arr == 1, np.array([2, 16, 16])))

    def test_ceil_not_round(self):
        arr = np.zeros((1, 1, 30), np.uint8)
        arr[0, 0, 15] = 1
        box = dilated_bounding_box(labels(arr, (3.0, 3.0, 1.0)), 1, slices=0).mask
        # 8/3 = 2.67 -> 3 voxels per side
        assert box.sum() == 7

    def test_contains_segment(self, rng):
        for _ in range(20):
            arr = (rng.random((4, 12, 12)) < 0.05).astype(np.uint8)
            arr[0, 0, 0] = 1
            assert dilated_bounding_box(labels(arr, (1.5, 2.0, 3.0)), 1).mask[arr == 1].all()

    def test_empty_segment(self):
        with pytest.raises(EmptySegmentError):
            dilated_bounding_box(labels(np.zeros((1, 2, 2))), 1)

    def test_union_one_class(self, rng):
        arr = np.zeros((3, 20, 20), np.uint8)
        arr[1, 5:8, 6:9] = 1
        y = labels(arr)
        np.testing.assert_array_equal(union_foreground_box(y).mask, dilated_bounding_box(y, 1).mask)

    def test_union_three_classes_matches_set_union(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            arr = np.zeros((5, 40, 40), np.uint8)
            for k in (1, 2):
                z, y0, x0 = rng.integers(0, 5), rng.integers(0, 37), rng.integers(0, 37)
                arr[z, y0:y0 + 3, x0:x0 + 3] = k
            vol = labels(arr, (1.5, 2.0, 3.0), k=3)
            expected = np.zeros(arr.shape, bool)
            for k in (1, 2):
                if (arr == k).any():
                    expected |= index_box(arr == k, np.array([2, 4, 6]))
            got = union_foreground_box(vol).mask
            assert got.sum() == expected.sum()
            np.testing.assert_array_equal(got, expected)

    def test_union_all_background(self):
        with pytest.raises(EmptySegmentError):
            union_foreground_box(labels(np.zeros((1, 2, 2))))


def test_no_warnings_for_defined_scores():
    y = labels([[[0, 1], [1, 0]]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        hausdorff95(y, y, 1)
