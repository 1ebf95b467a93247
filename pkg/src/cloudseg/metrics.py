"""Pixel confusion counting and the five evaluation metrics.

``miou`` here is the cloud-class intersection-over-union TP/(TP+FN+FP); the
conventional two-class mean (cloud IoU averaged with background IoU) is
reported alongside as ``miou_two_class`` for comparability with other tools.
Zero-denominator metrics are reported as None and rendered "NA".
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred_mask: np.ndarray, target_mask: np.ndarray) -> ConfusionCounts:
    """Exact counts; the positive class (cloud) is 1."""
    pred = np.asarray(pred_mask)
    target = np.asarray(target_mask)
    if pred.shape != target.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    for name, m in (("prediction", pred), ("target", target)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask contains non-binary values")
    p = pred.astype(bool)
    t = target.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


@dataclass(frozen=True)
class MetricSet:
    miou: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    oa: float | None
    miou_two_class: float | None

    def as_row(self) -> dict[str, str]:
        """Percentages with two decimals; undefined metrics render as NA."""
        def fmt(v):
            return "NA" if v is None else f"{100.0 * v:.2f}"
        return {"miou": fmt(self.miou), "precision": fmt(self.precision),
                "recall": fmt(self.recall), "f1": fmt(self.f1), "oa": fmt(self.oa),
                "miou_two_class": fmt(self.miou_two_class)}


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def metrics(c: ConfusionCounts) -> MetricSet:
    cloud_iou = _ratio(c.tp, c.tp + c.fn + c.fp)
    background_iou = _ratio(c.tn, c.tn + c.fn + c.fp)
    two_class = None
    if cloud_iou is not None and background_iou is not None:
        two_class = 0.5 * (cloud_iou + background_iou)
    return MetricSet(
        miou=cloud_iou,
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        oa=_ratio(c.tp + c.tn, c.total),
        miou_two_class=two_class,
    )


REPORT_COLUMNS = ["method", "miou", "precision", "recall", "f1", "oa",
                  "params_m", "gflops", "miou_two_class"]


def report_csv(rows: list[dict]) -> str:
    """Rows of {method, MetricSet fields, params_m, gflops} to CSV text."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in REPORT_COLUMNS})
    return buf.getvalue()
