"""
Non-maximum suppression and detection metrics.

Detections are matched to ground truths greedily in order of confidence, each
ground truth at most once. AP is the area under the monotone precision envelope
of the ranked list (all-point interpolation), averaged over classes with ground
truth; mAP averages AP over the IoU thresholds. Size buckets split ground-truth
areas into dataset terciles; truths outside a bucket are ignored, as are
detections that match them or that fall outside the bucket unmatched.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .boxes import Detection, GroundTruth, iou_matrix

logger = logging.getLogger(__name__)

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def nms(
    dets: Sequence[Detection],
    iou_threshold: float = 0.45,
    max_candidates: Optional[int] = None,
) -> List[Detection]:
    """
    Greedy per-class suppression.

    Candidates are visited by confidence (ties by input position); one is kept iff its
    IoU with every kept detection of the same class is at most `iou_threshold`.
    `max_candidates`, when given, limits the visit to the most confident candidates.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    if max_candidates is not None and len(order) > max_candidates:
        logger.warning(f"NMS received {len(order)} candidates, keeping the top {max_candidates}")
        order = order[:max_candidates]
    boxes = np.array([[d.box.cx, d.box.cy, d.box.w, d.box.h] for d in dets]).reshape(-1, 4)
    kept: List[int] = []
    by_class: Dict[int, List[int]] = {}
    for i in order:
        same = by_class.setdefault(dets[i].cls, [])
        if not same or iou_matrix(boxes[i : i + 1], boxes[same])[0].max() <= iou_threshold:
            same.append(i)
            kept.append(i)
    return [dets[i] for i in kept]


def average_precision(tp: Sequence[bool], n_truth: int) -> float:
    """All-point interpolated AP of a ranked list of true/false positive flags."""
    if n_truth == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    hits = np.cumsum(np.asarray(tp, dtype=np.float64))
    recall = hits / n_truth
    precision = hits / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class _Ranked:
    confidence: float
    image: int
    index: int
    detection: Detection


def _ranked(dets: Sequence[Sequence[Detection]], cls: int) -> List[_Ranked]:
    items = [
        _Ranked(d.confidence, image, index, d)
        for image, image_dets in enumerate(dets)
        for index, d in enumerate(image_dets)
        if d.cls == cls
    ]
    return sorted(items, key=lambda r: (-r.confidence, r.image, r.index))


def match_detections(
    dets: Sequence[Sequence[Detection]],
    truths: Sequence[Sequence[GroundTruth]],
    cls: int,
    iou_threshold: float,
    ignore: Optional[Sequence[Sequence[bool]]] = None,
    area_range: Optional[Tuple[float, float]] = None,
) -> Tuple[List[bool], int]:
    """
    Greedy matching of one class at one IoU threshold.

    Returns the TP flags of the ranked detections that count and the number of
    non-ignored truths.
    """
    truth_boxes = []
    ignored = []
    for image, image_truths in enumerate(truths):
        own = [(j, gt) for j, gt in enumerate(image_truths) if gt.cls == cls]
        truth_boxes.append(own)
        ignored.append({j: bool(ignore[image][j]) if ignore is not None else False for j, _ in own})
    n_truth = sum(1 for flags in ignored for j, flag in flags.items() if not flag)

    matched = [set() for _ in truths]
    flags: List[bool] = []
    for item in _ranked(dets, cls):
        candidates = truth_boxes[item.image]
        best, best_iou, best_ignored = None, -1.0, True
        if candidates:
            box = item.detection.box
            ious = iou_matrix(
                np.array([[box.cx, box.cy, box.w, box.h]]),
                np.array([[gt.cx, gt.cy, gt.w, gt.h] for _, gt in candidates]),
            )[0]
            # real truths first, then ignored ones; ties go to the lower truth index
            for want_ignored in (False, True):
                for (j, _), value in zip(candidates, ious):
                    if j in matched[item.image] or ignored[item.image][j] != want_ignored:
                        continue
                    if value >= iou_threshold and value > best_iou:
                        best, best_iou, best_ignored = j, value, want_ignored
                if best is not None:
                    break
        if best is not None:
            matched[item.image].add(best)
            if best_ignored:
                continue
            flags.append(True)
        else:
            area = item.detection.box.area
            if area_range is not None and not area_range[0] < area <= area_range[1]:
                continue
            flags.append(False)
    return flags, n_truth


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    ap: Dict[float, float] = field(default_factory=dict)
    map: float = 0.0
    map50: float = 0.0
    ap_small: float = math.nan
    ap_medium: float = math.nan
    ap_large: float = math.nan

    def as_rows(self) -> List[Tuple[str, float]]:
        rows = [("precision", self.precision), ("recall", self.recall), ("f1", self.f1)]
        rows += [(f"ap@{t:.2f}", value) for t, value in sorted(self.ap.items())]
        rows += [
            ("map50", self.map50),
            ("map", self.map),
            ("ap_small", self.ap_small),
            ("ap_medium", self.ap_medium),
            ("ap_large", self.ap_large),
        ]
        return rows


def _size_buckets(truths: Sequence[Sequence[GroundTruth]]) -> Dict[str, Tuple[float, float]]:
    areas = [gt.area for image in truths for gt in image]
    if not areas:
        return {}
    low, high = np.quantile(areas, [1.0 / 3.0, 2.0 / 3.0])
    return {"small": (-math.inf, low), "medium": (low, high), "large": (high, math.inf)}


def _mean_ap(dets, truths, classes, thresholds, ignore=None, area_range=None) -> Dict[float, float]:
    result = {}
    for t in thresholds:
        per_class = []
        for cls in classes:
            flags, n_truth = match_detections(dets, truths, cls, t, ignore, area_range)
            if n_truth:
                per_class.append(average_precision(flags, n_truth))
        result[t] = float(np.mean(per_class)) if per_class else math.nan
    return result


def evaluate(
    dets: Sequence[Sequence[Detection]],
    truths: Sequence[Sequence[GroundTruth]],
    iou_thresholds: Sequence[float] = (0.5,),
    score_threshold: float = 0.25,
) -> Metrics:
    """
    Precision, recall and F1 at (first IoU threshold, `score_threshold`); AP per IoU
    threshold; mAP; AP of the small, medium and large tercile buckets.
    """
    if len(dets) != len(truths):
        raise ValueError(f"{len(dets)} detection lists for {len(truths)} images")
    thresholds = tuple(float(t) for t in iou_thresholds)
    if not thresholds:
        raise ValueError("Need at least one IoU threshold")
    n_truth = sum(len(image) for image in truths)
    n_dets = sum(len(image) for image in dets)
    if n_truth == 0:
        # vacuous when nothing is predicted; every detection is a false positive otherwise
        value = 1.0 if n_dets == 0 else 0.0
        aps = {t: value for t in thresholds}
        return Metrics(value, 1.0, value, aps, value, aps.get(0.5, value), value, value, value)

    classes = sorted({gt.cls for image in truths for gt in image})
    operating = [[d for d in image if d.confidence >= score_threshold] for image in dets]
    tp = 0
    for cls in classes:
        flags, _ = match_detections(operating, truths, cls, thresholds[0])
        tp += sum(flags)
    kept = sum(1 for image in operating for d in image)
    precision = tp / kept if kept else 0.0
    recall = tp / n_truth
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    aps = _mean_ap(dets, truths, classes, thresholds)
    map50 = aps[0.5] if 0.5 in aps else _mean_ap(dets, truths, classes, (0.5,))[0.5]
    metrics = Metrics(precision, recall, f1, aps, float(np.mean(list(aps.values()))), map50)

    for name, (low, high) in _size_buckets(truths).items():
        ignore = [[not low < gt.area <= high for gt in image] for image in truths]
        bucket = _mean_ap(dets, truths, classes, thresholds, ignore, (low, high))
        values = [v for v in bucket.values() if not math.isnan(v)]
        setattr(metrics, f"ap_{name}", float(np.mean(values)) if values else math.nan)
    return metrics


def write_metrics_csv(metrics: Metrics, stream: TextIO):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for name, value in metrics.as_rows():
        writer.writerow([name, f"{value:.6f}"])


def format_metrics_table(metrics: Metrics) -> str:
    rows = metrics.as_rows()
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value:.4f}" for name, value in rows)
