import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfcinet.metrics import (
    HD_UNDEFINED,
    ConfusionCounts,
    boundary,
    confusion,
    dice,
    format_csv,
    format_table,
    hausdorff95,
    region_extract,
    region_metrics,
    sensitivity,
    specificity,
    true_negative_rate,
)
from oracles import boundary_points, brute_hd95, count_confusion


def small_masks(max_side=5):
    return st.tuples(*(st.integers(1, max_side),) * 3).flatmap(
        lambda shape: st.tuples(arrays(bool, shape), arrays(bool, shape)))


label_volumes = st.tuples(*(st.integers(1, 5),) * 3).flatmap(
    lambda shape: arrays(np.uint8, shape, elements=st.sampled_from([0, 1, 2, 4])))


class TestRegionExtract:
    def test_all_zero_wt_is_empty(self):
        assert not region_extract(np.zeros((3, 3, 3), np.uint8), "WT").any()

    def test_single_et_voxel(self):
        labels = np.zeros((3, 3, 3), np.uint8)
        labels[1, 2, 0] = 4
        mask = region_extract(labels, "ET")
        assert mask[1, 2, 0] and mask.sum() == 1

    def test_tc_membership(self):
        labels = np.zeros((2, 2, 2), np.uint8)
        labels[0, 0, 0], labels[0, 0, 1], labels[1, 1, 1] = 1, 2, 4
        mask = region_extract(labels, "TC")
        expected = np.array([v in (1, 4) for v in labels.ravel()]).reshape(labels.shape)
        assert np.array_equal(mask, expected)
        assert mask.sum() == 2

    def test_unknown_region(self):
        with pytest.raises(ValueError, match="unknown region"):
            region_extract(np.zeros((2, 2, 2), np.uint8), "NCR")

    def test_invalid_label_rejected(self):
        with pytest.raises(ValueError, match="invalid label"):
            region_extract(np.full((2, 2, 2), 3, np.uint8), "WT")

    @given(label_volumes)
    def test_regions_nested(self, labels):
        et, tc, wt = (region_extract(labels, r) for r in ("ET", "TC", "WT"))
        assert not (et & ~tc).any()
        assert not (tc & ~wt).any()


class TestConfusion:
    def test_all_true(self):
        m = np.ones((2, 2, 2), bool)
        assert confusion(m, m) == ConfusionCounts(8, 0, 0, 0)

    def test_all_false(self):
        m = np.zeros((2, 2, 2), bool)
        assert confusion(m, m) == ConfusionCounts(0, 0, 0, 8)

    def test_three_cubed_example(self):
        pred = np.zeros((3, 3, 3), bool)
        gt = np.zeros((3, 3, 3), bool)
        shared = [(0, 0, 0), (1, 1, 1), (2, 2, 2)]
        for idx in shared + [(0, 1, 2)]:
            pred[idx] = True
        for idx in shared + [(2, 1, 0)]:
            gt[idx] = True
        assert count_confusion(pred, gt) == (3, 1, 1, 22)
        assert confusion(pred, gt) == ConfusionCounts(3, 1, 1, 22)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=200, deadline=None)
    @given(small_masks())
    def test_matches_voxel_counting(self, masks):
        a, b = masks
        c = confusion(a, b)
        assert (c.tp, c.fp, c.fn, c.tn) == count_confusion(a, b)
        assert c.total == a.size


class TestScores:
    def test_dice_values(self):
        assert dice(ConfusionCounts(5, 0, 0, 0)) == 1.0
        assert dice(ConfusionCounts(0, 2, 3, 0)) == 0.0
        assert dice(ConfusionCounts(3, 1, 1, 0)) == 6 / 8 == 0.75

    def test_both_empty_dice_is_one(self):
        assert dice(ConfusionCounts(0, 0, 0, 10)) == 1.0

    def test_sensitivity(self):
        assert sensitivity(ConfusionCounts(4, 0, 0, 0)) == 1.0
        assert sensitivity(ConfusionCounts(0, 0, 0, 5)) == 1.0
        assert sensitivity(ConfusionCounts(3, 0, 1, 0)) == 0.75

    def test_specificity_uses_tp_over_tp_fp(self):
        assert specificity(ConfusionCounts(3, 1, 7, 100)) == 0.75
        assert specificity(ConfusionCounts(0, 0, 4, 4)) == 1.0
        assert true_negative_rate(ConfusionCounts(3, 1, 7, 3)) == 0.75

    @given(small_masks())
    def test_dice_symmetric_and_bounded(self, masks):
        a, b = masks
        d = dice(confusion(a, b))
        assert 0.0 <= d <= 1.0
        assert d == dice(confusion(b, a))


class TestHausdorff:
    def test_identical(self):
        m = np.zeros((4, 4, 4), bool)
        m[1:3, 0:4, 2] = True
        assert hausdorff95(m, m) == 0.0

    def test_two_single_points(self):
        a = np.zeros((4, 1, 1), bool)
        b = np.zeros((4, 1, 1), bool)
        a[0, 0, 0] = b[3, 0, 0] = True
        assert brute_hd95(a, b) == 3.0
        assert hausdorff95(a, b) == 3.0

    def test_percentile_rule_on_two_points(self):
        a = np.zeros((1, 1, 5), bool)
        b = np.zeros((1, 1, 5), bool)
        a[0, 0, 0] = a[0, 0, 4] = True
        b[0, 0, 0] = True
        # a->b distances [0, 4]: linear 95th percentile = 0.95 * 4; b->a = [0]
        assert brute_hd95(a, b, q=100) == 4.0
        assert brute_hd95(a, b) == pytest.approx(3.8, abs=1e-12)
        assert hausdorff95(a, b) == pytest.approx(3.8, abs=1e-12)

    def test_spacing_scales_distances(self):
        a = np.zeros((4, 1, 1), bool)
        b = np.zeros((4, 1, 1), bool)
        a[0, 0, 0] = b[3, 0, 0] = True
        assert hausdorff95(a, b, spacing=(2.0, 1.0, 1.0)) == 6.0

    def test_empty_cases(self):
        empty = np.zeros((3, 3, 3), bool)
        full = np.ones((3, 3, 3), bool)
        assert hausdorff95(empty, empty) == 0.0
        assert hausdorff95(empty, full) == HD_UNDEFINED
        assert hausdorff95(full, empty) == HD_UNDEFINED

    def test_boundary_matches_neighbour_rule(self, rng):
        m = rng.random((5, 4, 5)) < 0.6
        assert sorted(map(tuple, np.argwhere(boundary(m)))) == sorted(boundary_points(m))

    @settings(max_examples=60, deadline=None)
    @given(small_masks(4))
    def test_matches_brute_force(self, masks):
        a, b = masks
        assert hausdorff95(a, b) == pytest.approx(brute_hd95(a, b), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(small_masks(4))
    def test_symmetric(self, masks):
        a, b = masks
        assert hausdorff95(a, b) == hausdorff95(b, a)

    @settings(max_examples=40, deadline=None)
    @given(small_masks(4), st.tuples(*(st.integers(0, 3),) * 3))
    def test_translation_invariant(self, masks, offset):
        a, b = masks
        # one-voxel margin so shifted masks never touch a new border
        pa = np.pad(a, 1)
        pb = np.pad(b, 1)
        big_a = np.zeros(tuple(s + 3 for s in pa.shape), bool)
        big_b = np.zeros_like(big_a)
        sl = tuple(slice(o, o + s) for o, s in zip(offset, pa.shape))
        big_a[sl], big_b[sl] = pa, pb
        assert hausdorff95(big_a, big_b) == pytest.approx(hausdorff95(pa, pb), abs=1e-12)


def test_region_metrics_report(rng):
    gt = np.zeros((6, 6, 6), np.uint8)
    gt[1:5, 1:5, 1:5] = 2
    gt[2:4, 2:4, 2:4] = 4
    report = region_metrics(gt, gt)
    assert set(report) == {"WT", "TC", "ET"}
    for row in report.values():
        assert row["dice"] == 1.0 and row["hd95"] == 0.0
    csv_text = format_csv(report)
    assert csv_text.splitlines()[0] == "region,dice,sensitivity,specificity,tnr,hd95"
    assert len(csv_text.splitlines()) == 4
    assert "WT" in format_table(report)


def test_undefined_hd_reported_distinctly():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[1:3, 1:3, 1:3] = 2
    pred = np.zeros_like(gt)
    report = region_metrics(pred, gt)
    assert math.isinf(report["WT"]["hd95"])
    assert "undefined" in format_csv(report)
    # TC is empty in both volumes
    assert report["TC"]["hd95"] == 0.0 and report["TC"]["dice"] == 1.0
