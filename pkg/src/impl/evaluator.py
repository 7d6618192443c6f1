import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from interface.base_detector import Detection
from interface.base_evaluator import BaseEvaluator, EvalConfig, EvalResult
from util.box_ops import as_boxes, box_area, iou_matrix
from util.errors import DatasetError

logger = logging.getLogger(__name__)

GroundTruth = Tuple[np.ndarray, np.ndarray]
ALL_AREAS = [(0.0, float("inf"))]


@dataclass
class ClassMatches:
    """Matching outcome of one image and one class at every IoU threshold and area range."""

    scores: np.ndarray
    # A x T x D; True where the detection matched a ground truth
    matched: np.ndarray
    # A x T x D; matched to an out-of-range instance, or unmatched and itself out of range
    ignored: np.ndarray
    # A; ground truths inside each area range
    num_positives: np.ndarray


def truncate(detections: Sequence[Detection], cap: int) -> List[Detection]:
    """The `cap` most confident detections; ties keep their input order."""
    order = np.argsort(-np.array([d.confidence for d in detections], dtype=np.float64), kind="stable")
    return [detections[i] for i in order[:cap]]


def match_class(
    det_boxes: np.ndarray,
    det_scores: np.ndarray,
    gt_boxes: np.ndarray,
    iou_thresholds: Sequence[float],
    area_ranges: Sequence[Tuple[float, float]],
) -> ClassMatches:
    """
    Greedy confidence-descending matching: each detection takes the
    best-overlapping unmatched ground truth above the threshold, preferring
    in-range instances over out-of-range ones.
    """
    det_boxes, gt_boxes = as_boxes(det_boxes), as_boxes(gt_boxes)
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable")
    det_boxes, det_scores = det_boxes[order], np.asarray(det_scores, dtype=np.float64)[order]
    overlaps = iou_matrix(det_boxes, gt_boxes)
    gt_areas, det_areas = box_area(gt_boxes), box_area(det_boxes)
    num_t, num_d = len(iou_thresholds), det_boxes.shape[0]
    matched = np.zeros((len(area_ranges), num_t, num_d), dtype=bool)
    ignored = np.zeros((len(area_ranges), num_t, num_d), dtype=bool)
    positives = np.zeros(len(area_ranges), dtype=np.int64)

    for a, (low, high) in enumerate(area_ranges):
        gt_ignore = (gt_areas < low) | (gt_areas > high)
        positives[a] = int((~gt_ignore).sum())
        # in-range instances first, so a detection prefers them
        gt_order = np.argsort(gt_ignore, kind="stable")
        sorted_ignore = gt_ignore[gt_order]
        sorted_overlaps = overlaps[:, gt_order]
        out_of_range = (det_areas < low) | (det_areas > high)
        for t, threshold in enumerate(iou_thresholds):
            taken = np.zeros(gt_boxes.shape[0], dtype=bool)
            for d in range(num_d):
                best = min(threshold, 1 - 1e-10)
                choice = -1
                for g in range(gt_boxes.shape[0]):
                    if taken[g]:
                        continue
                    if choice > -1 and not sorted_ignore[choice] and sorted_ignore[g]:
                        break
                    if sorted_overlaps[d, g] < best:
                        continue
                    best, choice = sorted_overlaps[d, g], g
                if choice == -1:
                    ignored[a, t, d] = out_of_range[d]
                    continue
                taken[choice] = True
                matched[a, t, d] = True
                ignored[a, t, d] = sorted_ignore[choice]
    return ClassMatches(det_scores, matched, ignored, positives)


def interpolated_precision(recall: np.ndarray, precision: np.ndarray, recall_points: np.ndarray) -> np.ndarray:
    """Precision envelope sampled at `recall_points`; 0 past the last reached recall."""
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
    positions = np.searchsorted(recall, recall_points, side="left")
    sampled = np.zeros(recall_points.shape[0])
    valid = positions < recall.shape[0]
    sampled[valid] = envelope[positions[valid]]
    return sampled


def all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope, integrated at every recall change."""
    recall = np.concatenate([[0.0], recall, [1.0]])
    precision = np.concatenate([[0.0], precision, [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


class Evaluator(BaseEvaluator):
    """COCO-style AP / AR with size buckets over per-image detection lists."""

    def __init__(self, config: EvalConfig, num_classes: int, workers: int = 4):
        self.config = config
        self.num_classes = num_classes
        self.workers = workers
        self.recall_points = np.linspace(0.0, 1.0, config.recall_points)

    def _validate(self, detections: Sequence[Sequence[Detection]], ground_truths: Sequence[GroundTruth]) -> None:
        if len(detections) != len(ground_truths):
            raise DatasetError(f"{len(detections)} detection lists for {len(ground_truths)} images")
        for image, items in enumerate(detections):
            for d in items:
                if not 0 <= d.class_id < self.num_classes:
                    raise DatasetError(f"image {image}: detection class id {d.class_id} outside [0, {self.num_classes})")
                if not np.isfinite(d.confidence):
                    raise DatasetError(f"image {image}: non-finite detection confidence")
        for image, (_, classes) in enumerate(ground_truths):
            if np.any((np.asarray(classes) < 0) | (np.asarray(classes) >= self.num_classes)):
                raise DatasetError(f"image {image}: ground-truth class id outside [0, {self.num_classes})")

    def _match_image(self, args) -> Dict[int, ClassMatches]:
        detections, (gt_boxes, gt_classes), cap, thresholds, ranges = args
        kept = truncate(detections, cap)
        gt_boxes, gt_classes = as_boxes(gt_boxes), np.asarray(gt_classes, dtype=np.int64)
        out: Dict[int, ClassMatches] = {}
        det_classes = np.array([d.class_id for d in kept], dtype=np.int64)
        for class_id in range(self.num_classes):
            rows = np.flatnonzero(det_classes == class_id)
            gts = gt_boxes[gt_classes == class_id]
            if rows.size == 0 and gts.shape[0] == 0:
                continue
            boxes = np.array([kept[i].box.as_array() for i in rows]).reshape(-1, 4)
            scores = np.array([kept[i].confidence for i in rows], dtype=np.float64)
            out[class_id] = match_class(boxes, scores, gts, thresholds, ranges)
        return out

    def match(
        self,
        detections: Sequence[Sequence[Detection]],
        ground_truths: Sequence[GroundTruth],
        cap: int,
        thresholds: Optional[Sequence[float]] = None,
        ranges: Optional[Sequence[Tuple[float, float]]] = None,
    ) -> List[Dict[int, ClassMatches]]:
        """Per-image, per-class matches; images are matched in parallel and returned in order."""
        thresholds = list(self.config.iou_thresholds if thresholds is None else thresholds)
        ranges = list(self.config.area_ranges().values() if ranges is None else ranges)
        jobs = [(d, g, cap, thresholds, ranges) for d, g in zip(detections, ground_truths)]
        if self.workers <= 1 or len(jobs) < 2:
            return [self._match_image(job) for job in jobs]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            return list(executor.map(self._match_image, jobs))

    def accumulate(self, per_image: Sequence[Dict[int, ClassMatches]]) -> Tuple[np.ndarray, np.ndarray]:
        """
        precision: T x R x K x A and recall: T x K x A, with -1 wherever a
        class has no in-range positives.
        """
        num_t, num_r = len(self.config.iou_thresholds), self.recall_points.shape[0]
        num_a = len(self.config.area_ranges())
        precision = -np.ones((num_t, num_r, self.num_classes, num_a))
        recall = -np.ones((num_t, self.num_classes, num_a))
        for k in range(self.num_classes):
            entries = [image[k] for image in per_image if k in image]
            if not entries:
                continue
            scores = np.concatenate([e.scores for e in entries])
            order = np.argsort(-scores, kind="mergesort")
            for a in range(num_a):
                positives = int(sum(e.num_positives[a] for e in entries))
                if positives == 0:
                    continue
                matched = np.concatenate([e.matched[a] for e in entries], axis=1)[:, order]
                ignored = np.concatenate([e.ignored[a] for e in entries], axis=1)[:, order]
                tp = np.cumsum(matched & ~ignored, axis=1).astype(np.float64)
                fp = np.cumsum(~matched & ~ignored, axis=1).astype(np.float64)
                for t in range(num_t):
                    rc = tp[t] / positives
                    pr = tp[t] / np.maximum(tp[t] + fp[t], np.finfo(np.float64).eps)
                    recall[t, k, a] = rc[-1] if rc.size else 0.0
                    precision[t, :, k, a] = interpolated_precision(rc, pr, self.recall_points)
        return precision, recall

    @staticmethod
    def _mean(values: np.ndarray) -> float:
        valid = values[values > -1]
        return float(valid.mean()) if valid.size else 0.0

    def per_class_ap50(self, detections: Sequence[Sequence[Detection]], ground_truths: Sequence[GroundTruth], cap: int) -> Dict[int, float]:
        """All-point AP at IoU 0.5 per class that has positives."""
        out: Dict[int, float] = {}
        per_image = self.match(detections, ground_truths, cap, [0.5], ALL_AREAS)
        for k in range(self.num_classes):
            entries = [image[k] for image in per_image if k in image]
            positives = int(sum(e.num_positives[0] for e in entries))
            if positives == 0:
                continue
            scores = np.concatenate([e.scores for e in entries])
            order = np.argsort(-scores, kind="mergesort")
            hits = np.concatenate([e.matched[0, 0] for e in entries])[order]
            tp = np.cumsum(hits).astype(np.float64)
            fp = np.cumsum(~hits).astype(np.float64)
            out[k] = all_point_ap(tp / positives, tp / np.maximum(tp + fp, np.finfo(np.float64).eps)) if hits.size else 0.0
        return out

    def pr_curve(self, detections, ground_truths, class_id: int, cap: Optional[int] = None, threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
        """(recall, precision) of one class at one IoU threshold, for plotting."""
        per_image = self.match(detections, ground_truths, cap or self.config.max_detections, [threshold], ALL_AREAS)
        entries = [image[class_id] for image in per_image if class_id in image]
        positives = int(sum(e.num_positives[0] for e in entries))
        scores = np.concatenate([e.scores for e in entries]) if entries else np.zeros(0)
        if positives == 0 or scores.size == 0:
            return np.zeros(0), np.zeros(0)
        order = np.argsort(-scores, kind="mergesort")
        hits = np.concatenate([e.matched[0, 0] for e in entries])[order]
        tp = np.cumsum(hits).astype(np.float64)
        return tp / positives, tp / np.arange(1, hits.size + 1)

    def evaluate(
        self,
        detections: Sequence[Sequence[Detection]],
        ground_truths: Sequence[GroundTruth],
        max_detections: Optional[int] = None,
    ) -> EvalResult:
        self._validate(detections, ground_truths)
        cap = max_detections or self.config.max_detections
        ar_cap = min(self.config.ar_detections, cap)
        thresholds = self.config.iou_thresholds

        precision, recall = self.accumulate(self.match(detections, ground_truths, cap))
        if ar_cap != cap:
            _, recall = self.accumulate(self.match(detections, ground_truths, ar_cap))

        def ap_at(threshold: Optional[float] = None, area: int = 0) -> float:
            if threshold is None:
                return self._mean(precision[:, :, :, area])
            matches = [t for t, value in enumerate(thresholds) if abs(value - threshold) < 1e-9]
            if not matches:
                return 0.0
            return self._mean(precision[matches[0], :, :, area])

        per_class = self.per_class_ap50(detections, ground_truths, cap)
        result = EvalResult(
            ap=ap_at(),
            ap50=ap_at(0.5),
            ap75=ap_at(0.75),
            ap_small=ap_at(area=1),
            ap_medium=ap_at(area=2),
            ap_large=ap_at(area=3),
            ar10=self._mean(recall[:, :, 0]),
            ar_small=self._mean(recall[:, :, 1]),
            ar_medium=self._mean(recall[:, :, 2]),
            ar_large=self._mean(recall[:, :, 3]),
            map50=float(np.mean(list(per_class.values()))) if per_class else 0.0,
            per_class_ap50=per_class,
        )
        logger.debug("AP %.4f AP50 %.4f AR10 %.4f over %d images", result.ap, result.ap50, result.ar10, len(detections))
        return result
