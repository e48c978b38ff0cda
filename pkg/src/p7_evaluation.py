# p7_evaluation.py
"""
VOC-style detection metrics for the synthetic benchmark, plus the bridge from
a per-pixel class map to scored boxes.

Boxes are axis-aligned pixel boxes (x0, y0, x1, y1) with exclusive x1/y1.
"""
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np

from p1_config import ConfigError, ContractError, ShapeError
from p2_tensor_core import Tensor

INTERPOLATIONS = ("11pt", "all")


class Box(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def is_valid(self) -> bool:
        return self.x0 < self.x1 and self.y0 < self.y1


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Box
    score: float
    label: int = 1


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: Box
    label: int = 1


DetectionSet = List[Detection]


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0.0 for disjoint boxes."""
    if not (a.is_valid() and b.is_valid()):
        raise ShapeError(f"iou needs valid boxes, got {a} and {b}")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def _match_detections(
    detections: Sequence[Detection], ground_truth: Sequence[GroundTruth], iou_threshold: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score order (stable on ties).

    Each detection is compared with every ground truth box of its image and
    class; it is a true positive when its best overlap reaches the threshold
    and that box is still unmatched. Returns (sorted scores, tp flags).
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    by_image: Dict[Tuple[int, int], List[int]] = {}
    for j, gt in enumerate(ground_truth):
        by_image.setdefault((gt.image_id, gt.label), []).append(j)

    taken = np.zeros(len(ground_truth), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    scores = np.array([detections[i].score for i in order], dtype=float)
    for rank, i in enumerate(order):
        det = detections[i]
        if not np.isfinite(det.score):
            raise ContractError(f"detection score must be finite, got {det.score}")
        best, best_j = 0.0, -1
        for j in by_image.get((det.image_id, det.label), []):
            overlap = iou(det.box, ground_truth[j].box)
            if overlap > best:
                best, best_j = overlap, j
        if best_j >= 0 and best >= iou_threshold and not taken[best_j]:
            taken[best_j] = True
            tp[rank] = True
    return scores, tp


def precision_recall_curve(
    detections: Sequence[Detection], ground_truth: Sequence[GroundTruth], iou_threshold: float
) -> Tuple[np.ndarray, np.ndarray]:
    """(precision, recall) at each distinct score, after greedy matching.

    Detections with equal scores pass a score threshold together, so a tie
    group contributes one point, taken after its last member.
    """
    if not ground_truth:
        raise ContractError("precision/recall need at least one ground-truth object")
    scores, tp = _match_detections(detections, ground_truth, iou_threshold)
    tp_cum = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    group_end = np.append(scores[1:] != scores[:-1], True) if scores.size else np.zeros(0, dtype=bool)
    precision = tp_cum[group_end] / ranks[group_end]
    recall = tp_cum[group_end] / float(len(ground_truth))
    return precision.astype(float), recall.astype(float)


def _ap_all_points(precision: np.ndarray, recall: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _ap_11_point(precision: np.ndarray, recall: np.ndarray) -> float:
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        reached = precision[recall >= t]
        total += float(reached.max()) if reached.size else 0.0
    return total / 11.0


def voc_average_precision(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    interpolation: str = "all",
) -> float:
    """Area under the interpolated precision-recall curve, in [0, 1]."""
    if interpolation not in INTERPOLATIONS:
        raise ConfigError(f"interpolation must be one of {INTERPOLATIONS}, got {interpolation!r}")
    precision, recall = precision_recall_curve(detections, ground_truth, iou_threshold)
    if precision.size == 0:
        return 0.0
    if interpolation == "11pt":
        return _ap_11_point(precision, recall)
    return _ap_all_points(precision, recall)


def average_precision_by_class(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    interpolation: str = "all",
) -> Dict[int, float]:
    """AP per class label present in the ground truth."""
    if not ground_truth:
        raise ContractError("mAP needs at least one ground-truth object")
    labels = sorted({gt.label for gt in ground_truth})
    return {
        label: voc_average_precision(
            [d for d in detections if d.label == label],
            [g for g in ground_truth if g.label == label],
            iou_threshold,
            interpolation,
        )
        for label in labels
    }


def mean_average_precision(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    interpolation: str = "all",
) -> float:
    per_class = average_precision_by_class(detections, ground_truth, iou_threshold, interpolation)
    return float(np.mean(list(per_class.values())))


def recall_at(
    detections: Sequence[Detection], ground_truth: Sequence[GroundTruth], iou_threshold: float = 0.5
) -> float:
    """Matched ground truth objects over all ground truth objects."""
    if not ground_truth:
        raise ContractError("recall needs at least one ground-truth object")
    _, tp = _match_detections(detections, ground_truth, iou_threshold)
    return float(tp.sum()) / len(ground_truth)


def extract_detections(
    class_map, score_threshold: float = 0.5, image_ids: Optional[Sequence[int]] = None
) -> DetectionSet:
    """Boxes from a (K, H, W) or (N, K, H, W) probability map.

    For every foreground class k >= 1, pixels with probability > score_threshold
    are grouped into 4-connected components; each component gives its tight
    bounding box scored by the mean probability over its pixels.
    """
    probs = class_map.numpy() if isinstance(class_map, Tensor) else np.asarray(class_map, dtype=float)
    if probs.ndim == 3:
        probs = probs[None]
    if probs.ndim != 4 or probs.shape[1] < 2:
        raise ShapeError(f"class map must be (K, H, W) or (N, K, H, W) with K >= 2, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ContractError("class map contains non-finite probabilities")
    ids = list(image_ids) if image_ids is not None else list(range(probs.shape[0]))
    if len(ids) != probs.shape[0]:
        raise ShapeError(f"{len(ids)} image ids for {probs.shape[0]} maps")

    detections: DetectionSet = []
    for image_id, image_probs in zip(ids, probs):
        for label in range(1, image_probs.shape[0]):
            plane = image_probs[label]
            mask = (plane > score_threshold).astype(np.uint8)
            count, labels, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=4)
            for component in range(1, count):
                x, y, w, h = (int(v) for v in stats[component, :4])
                score = float(plane[labels == component].mean())
                detections.append(Detection(image_id, Box(x, y, x + w, y + h), score, label))
    return detections
