"""IoU accumulation, dispersion statistics, improvement percentages."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpseg.data_model import EmptyInput, ShapeMismatch
from bpseg.metrics import (
    DispersionStats,
    IoUAccumulator,
    NonPositiveBaseline,
    binarize,
    dispersion,
    improvement_percent,
    iou_accumulate,
    iou_value,
    mask_iou,
)


class TestBinarize:
    def test_ties_go_to_foreground(self):
        out = binarize(np.array([-0.1, 0.0, 0.1]))
        assert out.dtype == np.uint8
        assert out.tolist() == [0, 1, 1]

    def test_custom_threshold(self):
        out = binarize(np.array([0.2, 0.5, 0.7]), threshold=0.5)
        assert out.tolist() == [0, 1, 1]

    def test_shape_preserved(self):
        out = binarize(np.zeros((3, 4)))
        assert out.shape == (3, 4)
        assert np.all(out == 1)  # 0 >= 0


class TestIoU:
    def test_empty_union_is_perfect(self):
        assert iou_value(IoUAccumulator()) == 1.0
        zeros = np.zeros((4, 4), dtype=np.uint8)
        assert mask_iou(zeros, zeros) == 1.0

    def test_overlapping_squares_one_seventh(self):
        # two 2x2 squares on a 4x4 canvas overlapping in exactly one
        # pixel: intersection 1, union 7
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0:2, 0:2] = 1
        b[1:3, 1:3] = 1
        assert mask_iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_identical_masks(self):
        m = np.array([[1, 0], [1, 1]], dtype=np.uint8)
        assert mask_iou(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.array([1, 1, 0, 0], dtype=np.uint8)
        b = np.array([0, 0, 1, 1], dtype=np.uint8)
        assert mask_iou(a, b) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            iou_accumulate(IoUAccumulator(), np.zeros((2, 2)), np.zeros((2, 3)))

    def test_accumulator_is_immutable(self):
        acc = IoUAccumulator()
        with pytest.raises(AttributeError):
            acc.union_sum = 3

    def test_accumulate_returns_new(self):
        acc = IoUAccumulator()
        out = iou_accumulate(acc, np.ones((2, 2)), np.ones((2, 2)))
        assert acc == IoUAccumulator(0, 0)
        assert out == IoUAccumulator(4, 4)

    def test_accumulate_values_above_one_count_as_true(self):
        pred = np.array([0, 255], dtype=np.uint8)
        truth = np.array([0, 1], dtype=np.uint8)
        assert mask_iou(pred, truth) == 1.0

    def test_aggregate_differs_from_mean_of_per_image(self):
        # aggregate ratio weights images by their union size, unlike the
        # mean of per-image IoUs: the two must disagree on this fixture
        big_pred = np.ones((10, 10), dtype=np.uint8)
        big_truth = np.ones((10, 10), dtype=np.uint8)
        small_pred = np.array([[1, 0]], dtype=np.uint8)
        small_truth = np.array([[0, 1]], dtype=np.uint8)
        acc = IoUAccumulator()
        acc = iou_accumulate(acc, big_pred, big_truth)
        acc = iou_accumulate(acc, small_pred, small_truth)
        aggregate = iou_value(acc)
        per_image_mean = np.mean(
            [mask_iou(big_pred, big_truth), mask_iou(small_pred, small_truth)]
        )
        assert aggregate == pytest.approx(100 / 102, abs=1e-12)
        assert per_image_mean == pytest.approx(0.5, abs=1e-12)

    @settings(max_examples=40)
    @given(seed=st.integers(0, 2**32 - 1), splits=st.integers(1, 5))
    def test_merge_matches_pooled_accumulation(self, seed, splits):
        rng = np.random.default_rng(seed)
        pairs = [
            (rng.integers(0, 2, (5, 5)), rng.integers(0, 2, (5, 5)))
            for _ in range(splits * 2)
        ]
        pooled = IoUAccumulator()
        for p, t in pairs:
            pooled = iou_accumulate(pooled, p, t)

        partials = []
        for i in range(splits):
            acc = IoUAccumulator()
            for p, t in pairs[i * 2 : i * 2 + 2]:
                acc = iou_accumulate(acc, p, t)
            partials.append(acc)
        merged = IoUAccumulator()
        for acc in partials:
            merged = merged.merge(acc)
        assert merged == pooled

    @settings(max_examples=40)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_iou_within_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 2, (6, 6))
        truth = rng.integers(0, 2, (6, 6))
        assert 0.0 <= mask_iou(pred, truth) <= 1.0


class TestDispersion:
    def test_hand_example(self):
        stats = dispersion([1.0, 2.0, 3.0, 4.0])
        assert stats.mean == pytest.approx(2.5)
        assert stats.population_variance == pytest.approx(1.25)
        assert stats.sample_variance == pytest.approx(5.0 / 3.0)
        assert stats.mean_abs_deviation == pytest.approx(1.0)

    def test_single_value(self):
        stats = dispersion([0.7])
        assert stats == DispersionStats(0.7, 0.0, 0.0, 0.0)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            dispersion([])

    def test_accepts_any_iterable(self):
        stats = dispersion(x / 10 for x in range(5))
        assert stats.mean == pytest.approx(0.2)

    @settings(max_examples=40)
    @given(
        st.lists(
            st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False),
            min_size=2,
            max_size=20,
        )
    )
    def test_matches_numpy(self, values):
        stats = dispersion(values)
        v = np.array(values)
        assert stats.population_variance == pytest.approx(np.var(v), abs=1e-6)
        assert stats.sample_variance == pytest.approx(np.var(v, ddof=1), abs=1e-6)
        assert stats.mean_abs_deviation == pytest.approx(
            np.abs(v - v.mean()).mean(), abs=1e-6
        )


class TestImprovementPercent:
    def test_simple_gain(self):
        assert improvement_percent(0.5, 0.75) == pytest.approx(50.0)

    def test_decline_is_negative(self):
        assert improvement_percent(0.8, 0.6) == pytest.approx(-25.0)

    def test_published_style_values(self):
        # regression anchors at the precision the tables round to
        assert improvement_percent(0.3728, 0.4735) == pytest.approx(27.01, abs=5e-3)
        assert improvement_percent(0.3973, 0.4128) == pytest.approx(3.90, abs=5e-3)

    @pytest.mark.parametrize("before", [0.0, -0.1])
    def test_non_positive_baseline_rejected(self, before):
        with pytest.raises(NonPositiveBaseline):
            improvement_percent(before, 0.5)
