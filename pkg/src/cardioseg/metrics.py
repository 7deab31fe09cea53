"""Overlap metrics: confusion counts, Dice, F1, IoU, cohort aggregation.

For binary voxel comparisons F1 is algebraically identical to Dice
(2tp / (2tp + fp + fn)); it is computed through that shared expression so
the identity holds bit-exactly, and IoU relates to Dice through
iou/100 = dice / (2 - dice) at the counts level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .data_io import LabelMask

FOREGROUND_LABELS = (1, 2)
LABEL_NAMES = {0: "background", 1: "myocardium", 2: "lv_cavity"}


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _labels_of(mask) -> np.ndarray:
    if isinstance(mask, LabelMask):
        return mask.labels
    return np.asarray(mask)


def confusion(pred, gt, label: int) -> ConfusionCounts:
    """Voxelwise binary comparison of (pred == label) vs (gt == label)."""
    p = _labels_of(pred)
    g = _labels_of(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    pb = p == label
    gb = g == label
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def dice_from_counts(c: ConfusionCounts) -> float:
    """2tp / (2tp + fp + fn); a class absent from both masks scores 1."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return (2.0 * c.tp) / denom


def dice(pred, gt, label: int) -> float:
    return dice_from_counts(confusion(pred, gt, label))


def precision_recall_f1(c: ConfusionCounts) -> Tuple[float, float, float]:
    """Both masks empty scores (1, 1, 1); other zero denominators score 0.

    F1 is evaluated as 2tp / (2tp + fp + fn), the exact simplification of
    2 * precision * recall / (precision + recall) for counts.
    """
    if c.tp + c.fp + c.fn == 0:
        return 1.0, 1.0, 1.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = dice_from_counts(c)
    return precision, recall, f1


def iou_percent(c: ConfusionCounts) -> float:
    """tp / (tp + fp + fn) * 100; a class absent from both masks scores 100."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 100.0
    return (100.0 * c.tp) / denom


@dataclass
class MetricRow:
    subject: str
    phase: str
    label: int
    dice: float
    f1: float
    iou_percent: float

    @property
    def dice_loss(self) -> float:
        return 1.0 - self.dice


@dataclass
class Aggregate:
    dice: float
    dice_loss: float
    f1: float
    iou_percent: float
    n: int


@dataclass
class MetricsReport:
    rows: List[MetricRow]
    by_phase_label: Dict[Tuple[str, int], Aggregate]
    macro_by_phase: Dict[str, Aggregate]

    def mean_foreground_dice(self) -> float:
        vals = [a.dice for a in self.macro_by_phase.values()]
        return float(np.mean(vals)) if vals else float("nan")


def volume_metrics(pred, gt, subject: str, phase: str,
                   labels: Sequence[int] = FOREGROUND_LABELS) -> List[MetricRow]:
    rows = []
    for label in labels:
        c = confusion(pred, gt, label)
        _, _, f1 = precision_recall_f1(c)
        rows.append(MetricRow(subject, phase, label,
                              dice_from_counts(c), f1, iou_percent(c)))
    return rows


def _mean_aggregate(rows: Sequence[MetricRow]) -> Aggregate:
    return Aggregate(
        dice=float(np.mean([r.dice for r in rows])),
        dice_loss=float(np.mean([r.dice_loss for r in rows])),
        f1=float(np.mean([r.f1 for r in rows])),
        iou_percent=float(np.mean([r.iou_percent for r in rows])),
        n=len(rows),
    )


def aggregate_report(rows: Sequence[MetricRow]) -> MetricsReport:
    """Unweighted per-volume means per (phase, class) plus a foreground
    macro average per phase."""
    rows = list(rows)
    if not rows:
        raise ValueError("cannot aggregate an empty set of metric rows")
    by_phase_label: Dict[Tuple[str, int], Aggregate] = {}
    for key in sorted({(r.phase, r.label) for r in rows}):
        group = [r for r in rows if (r.phase, r.label) == key]
        by_phase_label[key] = _mean_aggregate(group)
    macro: Dict[str, Aggregate] = {}
    for phase in sorted({r.phase for r in rows}):
        group = [r for r in rows if r.phase == phase and r.label in FOREGROUND_LABELS]
        if group:
            macro[phase] = _mean_aggregate(group)
    return MetricsReport(rows, by_phase_label, macro)


def write_metrics_csv(report: MetricsReport, path) -> None:
    """One row per (volume, class); 6 significant digits, '.' decimals."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["subject", "phase", "class", "dice", "dice_loss", "f1", "iou_percent"])
        for r in report.rows:
            w.writerow([
                r.subject, r.phase, r.label,
                format(r.dice, ".6g"), format(r.dice_loss, ".6g"),
                format(r.f1, ".6g"), format(r.iou_percent, ".6g"),
            ])
