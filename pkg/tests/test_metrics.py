import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nullbus.metrics import (
    ConfusionCounts,
    MetricRow,
    aggregate,
    confusion,
    format_table,
    image_metrics,
    metric_row,
    read_results,
    write_results,
)


class TestConfusion:
    def test_hand_case(self):
        prob = np.array([[0.9, 0.2], [0.7, 0.1]])
        mask = np.array([[1, 1], [0, 0]])
        assert confusion(prob, mask) == ConfusionCounts(TP=1, FP=1, FN=1, TN=1)
        row = image_metrics(prob, mask)
        assert row == MetricRow(IoU=1 / 3, Dice=0.5, FPR=0.5, FNR=0.5)

    def test_two_by_two(self):
        c = confusion(np.array([[1.0, 1.0], [0.0, 0.0]]), np.array([[1, 0], [0, 0]]))
        assert c == ConfusionCounts(TP=1, FP=1, FN=0, TN=2)
        row = metric_row(c)
        assert row.IoU == 0.5 and row.Dice == pytest.approx(2 / 3) and row.FPR == pytest.approx(1 / 3)
        assert row.FNR == 0
        assert metric_row(ConfusionCounts(0, 0, 5, 95)) == MetricRow(0.0, 0.0, 0.0, 1.0)

    def test_threshold_is_inclusive(self):
        assert confusion(np.array([0.5]), np.array([1])).TP == 1
        assert confusion(np.array([0.5 - 1e-12]), np.array([1])).FN == 1
        assert confusion(np.array([0.3]), np.array([0]), threshold=0.3).FP == 1

    def test_validation(self):
        with pytest.raises(ValueError, match="shape"):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            confusion(np.array([1.5]), np.array([1]))
        with pytest.raises(ValueError):
            confusion(np.array([np.nan]), np.array([1]))


class TestDegenerate:
    def test_both_empty(self):
        row = image_metrics(np.zeros((4, 4)), np.zeros((4, 4)))
        assert row == MetricRow(1.0, 1.0, 0.0, 0.0)

    def test_empty_ground_truth_with_false_positives(self):
        prob = np.zeros((4, 4))
        prob[0, 0] = 1
        row = image_metrics(prob, np.zeros((4, 4)))
        assert row.IoU == 0 and row.Dice == 0 and row.FNR == 0 and row.FPR == 1 / 16

    def test_all_foreground_ground_truth(self):
        row = image_metrics(np.ones((3, 3)), np.ones((3, 3)))
        assert row == MetricRow(1.0, 1.0, 0.0, 0.0)

    def test_missed_lesion(self):
        row = image_metrics(np.zeros((3, 3)), np.ones((3, 3)))
        assert row == MetricRow(0.0, 0.0, 0.0, 1.0)


@st.composite
def counts(draw):
    return ConfusionCounts(*(draw(st.integers(0, 500)) for _ in range(4)))


class TestProperties:
    @settings(max_examples=300, deadline=None)
    @given(counts())
    def test_dice_iou_identity(self, c):
        row = metric_row(c)
        assert row.Dice == pytest.approx(2 * row.IoU / (1 + row.IoU), abs=1e-12)
        for v in row.as_tuple():
            assert 0.0 <= v <= 1.0

    @settings(max_examples=200, deadline=None)
    @given(counts(), st.integers(1, 50))
    def test_more_true_positives_never_hurt(self, c, extra):
        if c.TP + c.FP + c.FN == 0:
            return
        a = metric_row(c)
        b = metric_row(ConfusionCounts(c.TP + extra, c.FP, c.FN, c.TN))
        assert b.IoU >= a.IoU and b.Dice >= a.Dice

    @settings(max_examples=200, deadline=None)
    @given(counts(), st.integers(1, 50))
    def test_more_false_positives_never_help(self, c, extra):
        a = metric_row(c)
        b = metric_row(ConfusionCounts(c.TP, c.FP + extra, c.FN, c.TN))
        assert b.IoU <= a.IoU and b.Dice <= a.Dice and b.FPR >= a.FPR

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
    def test_threshold_monotonicity(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        prob, mask = rng.random((8, 8)), rng.integers(0, 2, (8, 8))
        a, b = confusion(prob, mask, lo), confusion(prob, mask, hi)
        assert b.FP <= a.FP and b.FN >= a.FN

    def test_identical_rows_aggregate_to_themselves(self):
        row = MetricRow(0.7, 0.8, 0.05, 0.1)
        mean = aggregate([(f % 3, row) for f in range(9)]).mean
        assert mean.as_tuple() == pytest.approx(row.as_tuple(), abs=1e-15)

    def test_counts_cover_image(self):
        rng = np.random.default_rng(0)
        prob, mask = rng.random((7, 9)), rng.integers(0, 2, (7, 9))
        assert confusion(prob, mask).total == 63


class TestAggregate:
    def test_fold_then_mean(self):
        rows = [(0, MetricRow(1, 1, 0, 0)), (0, MetricRow(0, 0, 1, 1)), (1, MetricRow(1, 1, 0, 0))]
        summary = aggregate(rows)
        assert summary.folds[0] == MetricRow(0.5, 0.5, 0.5, 0.5)
        assert summary.folds[1] == MetricRow(1, 1, 0, 0)
        # averaging fold means, not pooling images
        assert summary.mean == MetricRow(0.75, 0.75, 0.25, 0.25)

    def test_table_layout(self):
        summary = aggregate([(f, MetricRow(0.8, 0.9, 0.1, 0.05)) for f in range(5)])
        table = summary.table()
        assert table[0] == ["Fold", "IoU", "Dice", "FPR", "FNR"]
        assert [r[0] for r in table[1:]] == ["0", "1", "2", "3", "4", "Mean"]
        assert table[-1][1:] == ["0.8000", "0.9000", "0.1000", "0.0500"]
        assert "Mean" in format_table(table)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_results_roundtrip(self, tmp_path):
        rows = [("a", 0, MetricRow(1 / 3, 0.5, 0.1, 0.2)), ("b", 1, MetricRow(0.0, 0.0, 0.0, 1.0))]
        assert read_results(write_results(tmp_path / "r.rows", rows)) == rows
