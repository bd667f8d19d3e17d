"""Pixel-wise confusion counts, IoU/Dice/FPR/FNR, and per-fold aggregation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

METRIC_NAMES = ("IoU", "Dice", "FPR", "FNR")


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


@dataclass(frozen=True)
class MetricRow:
    IoU: float
    Dice: float
    FPR: float
    FNR: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return astuple(self)

    def rounded(self, ndigits: int = 4) -> "MetricRow":
        return MetricRow(*(round(v, ndigits) for v in astuple(self)))


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def confusion(probabilities, mask, threshold: float = 0.5) -> ConfusionCounts:
    """Count TP/FP/FN/TN with ``prediction = probability >= threshold``.

    A probability exactly at the threshold counts as positive.
    """
    prob = _as_numpy(probabilities).astype(np.float64)
    gt = _as_numpy(mask)
    if prob.shape != gt.shape:
        raise ValueError(f"probabilities {prob.shape} and mask {gt.shape} differ in shape")
    if prob.size and (np.isnan(prob).any() or prob.min() < 0.0 or prob.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = prob >= threshold
    gt = gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def metric_row(c: ConfusionCounts) -> MetricRow:
    """IoU, Dice, FPR and FNR from counts.

    Degenerate cases: nothing predicted and nothing present gives IoU = Dice = 1;
    no ground-truth positives gives FNR = 0; no ground-truth negatives gives FPR = 0.
    """
    overlap = c.TP + c.FP + c.FN
    iou = c.TP / overlap if overlap else 1.0
    dice = 2 * c.TP / (2 * c.TP + c.FP + c.FN) if overlap else 1.0
    fpr = c.FP / (c.FP + c.TN) if (c.FP + c.TN) else 0.0
    fnr = c.FN / (c.FN + c.TP) if (c.FN + c.TP) else 0.0
    return MetricRow(iou, dice, fpr, fnr)


def image_metrics(probabilities, mask, threshold: float = 0.5) -> MetricRow:
    return metric_row(confusion(probabilities, mask, threshold))


def mean_row(rows: Sequence[MetricRow]) -> MetricRow:
    if not rows:
        raise ValueError("cannot average an empty set of rows")
    n = len(rows)
    return MetricRow(*(math.fsum(getattr(r, name) for r in rows) / n for name in METRIC_NAMES))


@dataclass
class Summary:
    folds: dict[int, MetricRow]
    mean: MetricRow

    def table(self, ndigits: int = 4) -> list[list[str]]:
        rows = [["Fold", *METRIC_NAMES]]
        for fold in sorted(self.folds):
            rows.append([str(fold), *(f"{v:.{ndigits}f}" for v in self.folds[fold].as_tuple())])
        rows.append(["Mean", *(f"{v:.{ndigits}f}" for v in self.mean.as_tuple())])
        return rows


def aggregate(rows: Iterable[tuple[int, MetricRow]]) -> Summary:
    """Average per-image rows within each fold, then average the fold rows."""
    by_fold: dict[int, list[MetricRow]] = defaultdict(list)
    for fold, row in rows:
        by_fold[int(fold)].append(row)
    if not by_fold:
        raise ValueError("aggregate needs at least one row")
    folds = {f: mean_row(rs) for f, rs in sorted(by_fold.items())}
    return Summary(folds=folds, mean=mean_row(list(folds.values())))


# -- delimited tables --------------------------------------------------------


def write_results(path: str | Path, rows: Iterable[tuple[str, int, MetricRow]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "fold", *METRIC_NAMES])
        for sample_id, fold, row in rows:
            writer.writerow([sample_id, fold, *(repr(float(v)) for v in row.as_tuple())])
    return path


def read_results(path: str | Path) -> list[tuple[str, int, MetricRow]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append((rec["id"], int(rec["fold"]), MetricRow(*(float(rec[m]) for m in METRIC_NAMES))))
    return out


def write_table(path: str | Path, table: list[list[str]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(table)
    return path


def format_table(table: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in table)
