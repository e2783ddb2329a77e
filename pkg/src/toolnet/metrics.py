"""Confusion counts and the segmentation metrics reported per frame."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("frame", "iou_fg", "iou_bg", "mean_iou", "dsc_fg", "dsc_bg", "mean_dsc", "balanced_acc_fg")


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class tallies, index 0 = background, 1 = foreground."""

    tp: tuple[int, int]
    fp: tuple[int, int]
    fn: tuple[int, int]
    tn: tuple[int, int]

    @property
    def pixels(self) -> int:
        return self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]


def to_binary(mask: np.ndarray) -> np.ndarray:
    """Accept {0,1} or {0,255} masks; return a bool array."""
    m = np.asarray(mask)
    bad = np.setdiff1d(np.unique(m), [0, 1, 255])
    if bad.size:
        raise ValueError(f"mask is not binary; offending values: {bad.tolist()}")
    return m > 0


def argmax_mask(probs: np.ndarray) -> np.ndarray:
    """Foreground where p_fg > p_bg strictly, so ties go to background."""
    p = np.asarray(probs)
    if p.ndim == 4:
        p = p[0]
    return p[1] > p[0]


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionCounts:
    pred, gt = to_binary(pred_mask), to_binary(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp1 = int(np.count_nonzero(pred & gt))
    fp1 = int(np.count_nonzero(pred & ~gt))
    fn1 = int(np.count_nonzero(~pred & gt))
    tn1 = int(pred.size - tp1 - fp1 - fn1)
    return ConfusionCounts(tp=(tn1, tp1), fp=(fn1, fp1), fn=(fp1, fn1), tn=(tp1, tn1))


def _ratio(num: float, den: float) -> float:
    return 1.0 if den == 0 else num / den


def class_iou(c: ConfusionCounts, k: int) -> float:
    return _ratio(c.tp[k], c.tp[k] + c.fp[k] + c.fn[k])


def class_dsc(c: ConfusionCounts, k: int) -> float:
    return _ratio(2 * c.tp[k], 2 * c.tp[k] + c.fp[k] + c.fn[k])


def mean_iou(c: ConfusionCounts) -> float:
    return (class_iou(c, 0) + class_iou(c, 1)) / 2


def mean_dsc(c: ConfusionCounts) -> float:
    return (class_dsc(c, 0) + class_dsc(c, 1)) / 2


def balanced_accuracy_fg(c: ConfusionCounts) -> float:
    """Mean of foreground sensitivity and specificity."""
    sens = _ratio(c.tp[1], c.tp[1] + c.fn[1])
    specificity = _ratio(c.tn[1], c.tn[1] + c.fp[1])
    return 0.5 * (sens + specificity)


def frame_row(frame_id: str, c: ConfusionCounts) -> tuple:
    return (frame_id, class_iou(c, 1), class_iou(c, 0), mean_iou(c),
            class_dsc(c, 1), class_dsc(c, 0), mean_dsc(c), balanced_accuracy_fg(c))


@dataclass
class Report:
    rows: list[tuple] = field(default_factory=list)
    skipped: int = 0

    def means(self) -> tuple:
        if not self.rows:
            return ("mean",) + (float("nan"),) * (len(REPORT_COLUMNS) - 1)
        cols = np.array([r[1:] for r in self.rows], dtype=np.float64)
        return ("mean",) + tuple(float(v) for v in cols.mean(axis=0))

    def mean(self, column: str) -> float:
        return self.means()[REPORT_COLUMNS.index(column)]

    def to_text(self, sep: str = "\t") -> str:
        buf = io.StringIO()
        buf.write(sep.join(REPORT_COLUMNS) + "\n")
        for row in self.rows + [self.means()]:
            buf.write(sep.join([row[0]] + [f"{v:.6f}" for v in row[1:]]) + "\n")
        if self.skipped:
            buf.write(f"# skipped {self.skipped} unreadable frames\n")
        return buf.getvalue()


def report_from_masks(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]], skipped: int = 0) -> Report:
    """Per-frame metrics for ``(frame_id, pred_mask, gt_mask)`` triples."""
    return Report([frame_row(fid, confusion(p, g)) for fid, p, g in pairs], skipped)


def evaluate(net, frames, skipped: int = 0) -> Report:
    """Eval-mode predictions for each frame, scored against its mask."""
    pairs = []
    for f in frames:
        probs = net.forward(f.image, mode="eval").final.data
        pairs.append((f.id, argmax_mask(probs), f.mask))
    return report_from_masks(pairs, skipped)
