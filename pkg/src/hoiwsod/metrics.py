"""IoU, per-tuple recall and class-mean average precision."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .annotations import BoundingBox, ImageRecord


@dataclass(frozen=True)
class EvalPair:
    predicted: Optional[BoundingBox]
    truth: BoundingBox
    tuple_ref: tuple[str, int] = ("", 0)


@dataclass(frozen=True)
class Detection:
    object_class: str
    score: float
    box: BoundingBox
    image_id: str = ""

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "object_class": self.object_class,
                "score": self.score, "box": self.box.as_list()}


@dataclass
class ApResult:
    per_class: dict[str, float] = field(default_factory=dict)
    mAP: float = 0.0

    def to_json(self) -> dict:
        return {"per_class": {k: self.per_class[k] for k in sorted(self.per_class)},
                "mAP": self.mAP}


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a.area == 0 and b.area == 0:
        raise ValueError(f"both boxes are degenerate: {a.as_list()} {b.as_list()}")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def tuple_recall(pairs: Sequence[EvalPair], iou_threshold: float = 0.5) -> float:
    """Fraction of tuples whose predicted box has IoU strictly above the threshold."""
    if not pairs:
        raise ValueError("tuple_recall needs at least one pair")
    hits = sum(1 for p in pairs if p.predicted is not None and iou(p.predicted, p.truth) > iou_threshold)
    return hits / len(pairs)


def average_precision(tp: np.ndarray, n_truth: int, method: str = "all_point") -> float:
    """AP from TP flags of score-sorted detections."""
    if n_truth == 0:
        raise ValueError("average precision undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_truth
    precision = ctp / np.arange(1, tp.size + 1)
    if method == "11_point":
        return float(np.mean([precision[recall >= r].max() if (recall >= r).any() else 0.0
                              for r in np.linspace(0, 1, 11)]))
    if method != "all_point":
        raise ValueError(f"unknown AP method {method!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def match_detections(dets: Sequence[Detection], truths: dict[str, list[BoundingBox]],
                     iou_threshold: float) -> np.ndarray:
    """Greedy matching of score-sorted detections; returns TP flags in sorted order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = {img: [False] * len(boxes) for img, boxes in truths.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for k, t in enumerate(truths.get(d.image_id, ())):
            if used[d.image_id][k]:
                continue
            o = iou(d.box, t)
            if o > best_iou:
                best, best_iou = k, o
        if best >= 0:
            used[d.image_id][best] = True
            tp[rank] = 1.0
    return tp


def ground_truth_boxes(records: Iterable[ImageRecord],
                       classes: Optional[Iterable[str]] = None) -> dict[str, dict[str, list[BoundingBox]]]:
    """class -> image_id -> boxes, taken verbatim from the tuples."""
    keep = None if classes is None else set(classes)
    gt: dict[str, dict[str, list[BoundingBox]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        for t in rec.tuples:
            if t.object_box is None or (keep is not None and t.object_class not in keep):
                continue
            gt[t.object_class][rec.image_id].append(t.object_box)
    return gt


def mean_average_precision(detections: Iterable[Detection], records: Iterable[ImageRecord],
                           iou_threshold: float = 0.5, method: str = "all_point",
                           classes: Optional[Iterable[str]] = None) -> ApResult:
    """Per-class AP and their mean over classes that have ground truth."""
    gt = ground_truth_boxes(records, classes)
    by_class: dict[str, list[Detection]] = defaultdict(list)
    for d in detections:
        by_class[d.object_class].append(d)
    result = ApResult()
    for cls in sorted(gt):
        truths = gt[cls]
        n = sum(len(v) for v in truths.values())
        tp = match_detections(by_class.get(cls, []), truths, iou_threshold)
        result.per_class[cls] = average_precision(tp, n, method)
    result.mAP = float(np.mean(list(result.per_class.values()))) if result.per_class else 0.0
    return result


def recall_pairs(records: Sequence[ImageRecord], predictions: dict) -> list[EvalPair]:
    """EvalPairs for every boxed tuple; ``predictions`` maps (image_id, j) to a box or None."""
    pairs = []
    for rec in records:
        for j, t in enumerate(rec.tuples):
            if t.object_box is None:
                continue
            pred = predictions.get((rec.image_id, j))
            if pred is not None and not isinstance(pred, BoundingBox):
                pred = pred.box
            pairs.append(EvalPair(pred, t.object_box, (rec.image_id, j)))
    return pairs
