"""Segmentation and trajectory metrics, plus report writers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NoOverlap, ShapeMismatch, ValidationError

DEFAULT_MAE_THRESHOLD_FT = 15.0
BF_TOLERANCE_FRACTION = 0.0075


def _labels(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "labels", mask)).astype(np.uint8)


def _pair(pred, truth):
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} and truth {t.shape} differ in shape")
    return p, t


def confusion(pred, truth, classes: int = 2) -> np.ndarray:
    """cm[i, j] = pixels with truth i predicted as j."""
    p, t = _pair(pred, truth)
    return np.bincount(t.ravel().astype(np.intp) * classes + p.ravel(),
                       minlength=classes * classes).reshape(classes, classes)


def pixel_accuracy(pred, truth, classes: int = 2) -> dict:
    cm = confusion(pred, truth, classes)
    support = cm.sum(axis=1)
    per_class = [float(cm[c, c] / support[c]) if support[c] else 1.0 for c in range(classes)]
    return {"per_class": per_class,
            "global": float(np.trace(cm) / cm.sum()) if cm.sum() else 1.0,
            "mean": float(np.mean(per_class)),
            "absent": [int(c) for c in range(classes) if support[c] == 0]}


def jaccard(pred, truth, classes: int = 2) -> dict:
    """Per-class IoU; a class missing from both masks scores 1.0 and is flagged."""
    cm = confusion(pred, truth, classes)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = [float(tp[c] / union[c]) if union[c] else 1.0 for c in range(classes)]
    support = cm.sum(axis=1)
    total = int(support.sum())
    weighted = sum(j * int(n) for j, n in zip(per_class, support)) / total if total else 1.0
    return {"per_class": per_class, "mean": float(np.mean(per_class)), "weighted": weighted,
            "absent": [int(c) for c in range(classes) if union[c] == 0]}


def boundary(mask) -> np.ndarray:
    """Label-1 pixels with a 4-neighbour that is 0 or outside the image."""
    m = _labels(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def default_bf_tolerance(shape) -> float:
    return BF_TOLERANCE_FRACTION * float(np.hypot(*shape))


def _distance_to(bound: np.ndarray) -> np.ndarray:
    return ndimage.distance_transform_edt(~bound)


def bf_score(pred, truth, tolerance: float | None = None) -> float:
    """Boundary F1 of the strand class; 1.0 when neither mask has a boundary."""
    p, t = _pair(pred, truth)
    tol = default_bf_tolerance(p.shape) if tolerance is None else float(tolerance)
    bp, bt = boundary(p), boundary(t)
    if not bp.any() and not bt.any():
        return 1.0
    if not bp.any() or not bt.any():
        return 0.0
    precision = float(np.mean(_distance_to(bt)[bp] <= tol))
    recall = float(np.mean(_distance_to(bp)[bt] <= tol))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class SegScore:
    per_class_accuracy: list
    global_accuracy: float
    mean_accuracy: float
    per_class_iou: list
    mean_iou: float
    weighted_iou: float
    bf_score: float
    absent_classes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def segmentation_score(pred, truth, bf_tolerance: float | None = None) -> SegScore:
    acc = pixel_accuracy(pred, truth)
    iou = jaccard(pred, truth)
    return SegScore(acc["per_class"], acc["global"], acc["mean"], iou["per_class"],
                    iou["mean"], iou["weighted"], bf_score(pred, truth, bf_tolerance),
                    sorted(set(iou["absent"])))


# trajectories -------------------------------------------------------------

def _frame_period(*trajs) -> float | None:
    steps = [np.diff(t.times) for t in trajs if len(t.times) > 1]
    if not steps:
        return None
    return float(min(np.median(s) for s in steps))


def align(detected, truth, frame_period: float | None = None):
    """Index pairs (i_detected, i_truth) whose timestamps are within half a frame."""
    period = frame_period if frame_period is not None else _frame_period(detected, truth)
    half = 0.5 * period if period else 0.0
    tt = truth.times
    idx = np.searchsorted(tt, detected.times)
    left = np.clip(idx - 1, 0, len(tt) - 1)
    right = np.clip(idx, 0, len(tt) - 1)
    nearest = np.where(np.abs(tt[left] - detected.times) <= np.abs(tt[right] - detected.times),
                       left, right)
    ok = np.abs(tt[nearest] - detected.times) <= half + 1e-9
    return np.flatnonzero(ok), nearest[ok]


def trajectory_mae(detected, truth, frame_period: float | None = None) -> float:
    di, ti = align(detected, truth, frame_period)
    if len(di) == 0:
        raise NoOverlap(f"trajectories {detected.strand_id} and {truth.strand_id} share no "
                        f"time samples")
    return float(np.mean(np.abs(detected.positions[di] - truth.positions[ti])))


@dataclass
class TrajMatchReport:
    pairs: list
    tp: int
    fp: int
    fn: int
    tpr: float
    fpr: float
    mae_threshold_ft: float

    def to_json(self) -> dict:
        return asdict(self)


def match_trajectories(detected, truth, mae_threshold_ft: float = DEFAULT_MAE_THRESHOLD_FT,
                       frame_period: float | None = None) -> TrajMatchReport:
    """Greedy one-to-one matching in ascending MAE order.

    Every greedy pair is reported; only pairs at or under the threshold count as
    true positives. TPR is 1.0 with no truth and FPR is 0.0 with no detections.
    """
    if not mae_threshold_ft > 0:
        raise ValidationError("mae threshold must be positive")
    candidates = []
    for i, d in enumerate(detected):
        for j, t in enumerate(truth):
            try:
                candidates.append((trajectory_mae(d, t, frame_period), i, j))
            except NoOverlap:
                continue
    candidates.sort()
    used_d, used_t, pairs = set(), set(), []
    for mae, i, j in candidates:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        pairs.append((int(detected[i].strand_id), int(truth[j].strand_id), float(mae)))
    tp = sum(1 for p in pairs if p[2] <= mae_threshold_ft)
    fp = len(detected) - tp
    fn = len(truth) - tp
    tpr = tp / (tp + fn) if tp + fn else 1.0
    fpr = fp / (tp + fp) if tp + fp else 0.0
    return TrajMatchReport(pairs, tp, fp, fn, float(tpr), float(fpr), float(mae_threshold_ft))


# reports ------------------------------------------------------------------

def write_report_json(path, seg: SegScore | None = None, traj: TrajMatchReport | None = None,
                      config: dict | None = None) -> dict:
    report = {"seg": seg.to_json() if seg else None,
              "traj": traj.to_json() if traj else None,
              "config": config or {}}
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


SUMMARY_HEADER = ["lane", "global_accuracy", "mean_iou", "weighted_iou", "bf_score",
                  "tp", "fp", "fn", "tpr", "fpr"]


def write_summary_csv(rows, path) -> None:
    """rows: iterable of (lane, SegScore | None, TrajMatchReport | None)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for lane, seg, tr in rows:
            s = [seg.global_accuracy, seg.mean_iou, seg.weighted_iou, seg.bf_score] if seg \
                else [""] * 4
            t = [tr.tp, tr.fp, tr.fn, tr.tpr, tr.fpr] if tr else [""] * 5
            writer.writerow([lane] + s + t)
