"""Segmentation and detection metrics.

Dice / IoU on binary volumes, COCO-style size-stratified Average Precision and
Average Recall under greedy score-descending matching, and lesion-wise
component counting. Rates with a zero denominator are returned as None
("undefined") rather than a fabricated number.

Boxes use the half-open pixel convention (row_min, col_min, row_max, col_max):
a box [0, 0, 2, 2] covers the 4 pixels with row, col in {0, 1}. Object areas
for size stratification are measured in upsampled detector-patch pixels
(256x256 space); the small/medium/large boundaries are 32^2 and 96^2 px.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatchError

SMALL_MAX_AREA = 32 * 32
MEDIUM_MAX_AREA = 96 * 96
SIZE_CLASSES = ("small", "medium", "large", "all")
AR_IOU_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def size_class_of(area) -> str:
    if area < SMALL_MAX_AREA:
        return "small"
    if area <= MEDIUM_MAX_AREA:
        return "medium"
    return "large"


def dice(a, b) -> float:
    """2|a&b| / (|a|+|b|); empty vs empty is defined as 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise GeometryMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    """Intersection over union; empty vs empty is defined as 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise GeometryMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def box_area(box) -> int:
    r0, c0, r1, c1 = box
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"invalid box {box}: min must be < max per axis")
    return (r1 - r0) * (c1 - c0)


def iou_boxes(a, b) -> float:
    """IoU of two half-open boxes."""
    area_a, area_b = box_area(a), box_area(b)
    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    inter = max(0, r1 - r0) * max(0, c1 - c0)
    union = area_a + area_b - inter
    return inter / union if union else 1.0


@dataclass
class DetInstance:
    """One scored detection on one image (box and/or mask)."""

    image_id: object
    score: float
    box: Optional[tuple] = None
    mask: Optional[np.ndarray] = None


@dataclass
class TruthInstance:
    """One ground-truth object; area defaults to mask sum or box area."""

    image_id: object
    box: Optional[tuple] = None
    mask: Optional[np.ndarray] = None
    area: Optional[float] = None

    def __post_init__(self):
        if self.area is None:
            if self.mask is not None:
                self.area = float(np.asarray(self.mask, dtype=bool).sum())
            elif self.box is not None:
                self.area = float(box_area(self.box))
            else:
                raise ValueError("truth needs a box, a mask, or an explicit area")


def _pair_iou(det: DetInstance, truth: TruthInstance) -> float:
    if det.mask is not None and truth.mask is not None:
        return iou(det.mask, truth.mask)
    if det.box is not None and truth.box is not None:
        return iou_boxes(det.box, truth.box)
    raise ValueError("detection and truth have no comparable geometry")


def _greedy_match(dets, truths, iou_threshold):
    """Match score-descending detections to truths, each truth at most once.

    dets must already be sorted by descending score. Returns a list mapping
    each detection to its matched truth index or -1. IoU ties break toward the
    lowest truth index.
    """
    matched = [-1] * len(dets)
    taken = [False] * len(truths)
    for d_idx, det in enumerate(dets):
        best_iou = 0.0
        best_t = -1
        for t_idx, truth in enumerate(truths):
            if taken[t_idx]:
                continue
            v = _pair_iou(det, truth)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_t = t_idx
        if best_t >= 0:
            matched[d_idx] = best_t
            taken[best_t] = True
    return matched


def _by_image(dets, truths):
    image_ids = sorted(
        {d.image_id for d in dets} | {t.image_id for t in truths}, key=repr
    )
    for img in image_ids:
        d = [x for x in dets if x.image_id == img]
        d.sort(key=lambda x: -x.score)
        t = [x for x in truths if x.image_id == img]
        yield img, d, t


def _in_class(truth: TruthInstance, size_class: str) -> bool:
    return size_class == "all" or size_class_of(truth.area) == size_class


def average_precision(dets, truths, iou_threshold=0.5, size_class="all") -> Optional[float]:
    """Area under the interpolated precision-recall curve for one size class.

    Greedy score-descending matching per image; each truth is matched at most
    once. Truths outside the size class are ignored (matches to them count
    neither as TP nor FP); unmatched detections count as FP in every class.
    Returns None when the class contains no truths.
    """
    npos = sum(1 for t in truths if _in_class(t, size_class))
    if npos == 0:
        return None
    records = []  # (score, order, is_tp, is_ignored)
    order = 0
    for _, img_dets, img_truths in _by_image(dets, truths):
        matched = _greedy_match(img_dets, img_truths, iou_threshold)
        for det, t_idx in zip(img_dets, matched):
            if t_idx < 0:
                records.append((det.score, order, False, False))
            elif _in_class(img_truths[t_idx], size_class):
                records.append((det.score, order, True, False))
            else:
                records.append((det.score, order, False, True))
            order += 1
    records.sort(key=lambda r: (-r[0], r[1]))
    tp = np.array([r[2] for r in records if not r[3]], dtype=np.float64)
    if tp.size == 0:
        return 0.0
    fp = 1.0 - tp
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / npos
    precision = cum_tp / (cum_tp + cum_fp)
    # every-point interpolation: integrate the precision envelope over recall
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(np.diff(mrec))[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_recall(
    dets, truths, iou_thresholds=AR_IOU_THRESHOLDS, size_class="all", max_dets=100
) -> Optional[float]:
    """Recall of greedy matching averaged over IoU thresholds, top max_dets."""
    npos = sum(1 for t in truths if _in_class(t, size_class))
    if npos == 0:
        return None
    recalls = []
    grouped = [
        (img_dets[:max_dets], img_truths)
        for _, img_dets, img_truths in _by_image(dets, truths)
    ]
    for thr in iou_thresholds:
        hits = 0
        for img_dets, img_truths in grouped:
            matched = _greedy_match(img_dets, img_truths, thr)
            for t_idx in matched:
                if t_idx >= 0 and _in_class(img_truths[t_idx], size_class):
                    hits += 1
        recalls.append(hits / npos)
    return float(np.mean(recalls))


def lesionwise_counts(pred: np.ndarray, truth: np.ndarray):
    """(TP, FP, FN) over 26-connected components.

    A truth component is a TP iff it overlaps at least one predicted voxel; a
    predicted component overlapping no truth voxel is an FP.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise GeometryMismatchError(f"shape mismatch {pred.shape} vs {truth.shape}")
    t_labels, t_n = ndimage.label(truth, structure=CONNECTIVITY_26)
    p_labels, p_n = ndimage.label(pred, structure=CONNECTIVITY_26)
    tp = 0
    for t in range(1, t_n + 1):
        if pred[t_labels == t].any():
            tp += 1
    fn = t_n - tp
    fp = 0
    for p in range(1, p_n + 1):
        if not truth[p_labels == p].any():
            fp += 1
    return tp, fp, fn


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    iou: float
    tp: int
    fp: int
    fn: int
    empty_pair: bool = False  # both pred and truth empty (Dice/IoU = 1 by convention)


@dataclass
class MetricsReport:
    """Per-case metrics plus size-stratified detection aggregates.

    ap_by_size / ar_by_size map {small, medium, large, all} to a rate or None
    ("undefined", no truths in that class); they stay empty when no detection
    records were available.
    """

    per_case: list = field(default_factory=list)
    ap_by_size: dict = field(default_factory=dict)  # averaged over the IoU sweep
    ap50_by_size: dict = field(default_factory=dict)
    ar_by_size: dict = field(default_factory=dict)

    @property
    def lesionwise(self):
        tp = sum(c.tp for c in self.per_case)
        fp = sum(c.fp for c in self.per_case)
        fn = sum(c.fn for c in self.per_case)
        return tp, fp, fn

    def mean_dice(self):
        return float(np.mean([c.dice for c in self.per_case])) if self.per_case else None

    def mean_iou(self):
        return float(np.mean([c.iou for c in self.per_case])) if self.per_case else None

    def sensitivity(self):
        tp, _, fn = self.lesionwise
        return tp / (tp + fn) if tp + fn else None

    def as_dict(self):
        tp, fp, fn = self.lesionwise
        payload = {
            "n_cases": len(self.per_case),
            "per_case": [
                {
                    "case_id": c.case_id,
                    "dice": c.dice,
                    "iou": c.iou,
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                    "empty_pair": c.empty_pair,
                }
                for c in sorted(self.per_case, key=lambda c: c.case_id)
            ],
            "aggregate": {
                "mean_dice": self.mean_dice(),
                "mean_iou": self.mean_iou(),
                "lesionwise": {"tp": tp, "fp": fp, "fn": fn},
                "sensitivity": self.sensitivity(),
            },
        }
        if self.ap_by_size:
            payload["detection"] = {
                "ap": self.ap_by_size,
                "ap50": self.ap50_by_size,
                "ar": self.ar_by_size,
            }
        else:
            payload["detection"] = "undefined"
        return payload


def evaluate_case(case_id, pred: np.ndarray, truth: np.ndarray) -> CaseMetrics:
    tp, fp, fn = lesionwise_counts(pred, truth)
    empty = not np.asarray(pred).any() and not np.asarray(truth).any()
    return CaseMetrics(
        case_id=case_id,
        dice=dice(pred, truth),
        iou=iou(pred, truth),
        tp=tp,
        fp=fp,
        fn=fn,
        empty_pair=empty,
    )


def detection_report(dets, truths, iou_threshold=0.5):
    """AP/AR per size class; AP both at IoU 0.50 and averaged over the sweep."""
    ap, ap50, ar = {}, {}, {}
    for cls in SIZE_CLASSES:
        ap50[cls] = average_precision(dets, truths, iou_threshold, cls)
        sweep = []
        for thr in AR_IOU_THRESHOLDS:
            v = average_precision(dets, truths, thr, cls)
            if v is None:
                sweep = None
                break
            sweep.append(v)
        ap[cls] = float(np.mean(sweep)) if sweep is not None else None
        ar[cls] = average_recall(dets, truths, size_class=cls)
    return {"ap50": ap50, "ap": ap, "ar": ar}
