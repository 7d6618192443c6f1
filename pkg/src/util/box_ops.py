"""Box geometry on (n, 4) arrays of x1, y1, x2, y2 in continuous pixel coordinates."""

from typing import Sequence, Tuple

import numpy as np

# exp() guard for decoded widths/heights
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))


def as_boxes(boxes) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return np.maximum(boxes[:, 2] - boxes[:, 0], 0.0) * np.maximum(boxes[:, 3] - boxes[:, 1], 0.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection area over union area of two boxes, in [0, 1]."""
    return float(iou_matrix(a, b)[0, 0])


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) that move each anchor onto its box."""
    boxes, anchors = as_boxes(boxes), as_boxes(anchors)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gx = boxes[:, 0] + 0.5 * gw
    gy = boxes[:, 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas, anchors = as_boxes(deltas), as_boxes(anchors)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE)) * aw
    h = np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE)) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, image_h: int, image_w: int) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, image_w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, image_h)
    return boxes


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy class-agnostic suppression; returns kept indices, best first."""
    boxes = as_boxes(boxes)
    order = score_order(scores)
    overlaps = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > threshold
    return np.asarray(keep, dtype=np.int64)


def nms_per_class(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy suppression run independently inside each class; kept indices sorted by score."""
    classes = np.asarray(classes)
    keep = []
    for cls in np.unique(classes):
        members = np.flatnonzero(classes == cls)
        keep.extend(members[nms(as_boxes(boxes)[members], np.asarray(scores)[members], threshold)])
    keep = np.asarray(keep, dtype=np.int64)
    return keep[score_order(np.asarray(scores)[keep])] if keep.size else keep


def build_anchors(
    map_h: int,
    map_w: int,
    scales: Sequence[float],
    ratios: Sequence[float],
    stride: int,
    image_h: int,
    image_w: int,
    mode: str = "train",
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One anchor per (location, scale, ratio), centred on the location's image
    centre. Slot k = ((i * map_w + j) * len(scales) + s) * len(ratios) + r
    matches the RPN output layout. `train` drops anchors crossing the image
    border; `inference` clips them. Returns (anchors, slots).
    """
    scales = np.asarray(scales, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    widths = (scales[:, None] / np.sqrt(ratios[None, :])).reshape(-1)
    heights = (scales[:, None] * np.sqrt(ratios[None, :])).reshape(-1)
    cy, cx = np.meshgrid((np.arange(map_h) + 0.5) * stride, (np.arange(map_w) + 0.5) * stride, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    anchors = np.stack(
        [cx - 0.5 * widths, cy - 0.5 * heights, cx + 0.5 * widths, cy + 0.5 * heights], axis=2
    ).reshape(-1, 4)
    slots = np.arange(anchors.shape[0])
    if mode == "train":
        inside = (anchors[:, 0] >= 0) & (anchors[:, 1] >= 0) & (anchors[:, 2] <= image_w) & (anchors[:, 3] <= image_h)
        return anchors[inside], slots[inside]
    if mode == "inference":
        return clip_boxes(anchors, image_h, image_w), slots
    raise ValueError(f"Unknown anchor mode '{mode}'")


def to_map_coords(boxes: np.ndarray, image_hw: Tuple[int, int], map_hw: Tuple[int, int]) -> np.ndarray:
    """
    Image boxes to align-corners map coordinates: the image extent [0, W]
    lands on cell centres [0, w' - 1], so positive-area image boxes keep
    positive area on the map.
    """
    boxes = as_boxes(boxes)
    sx = (map_hw[1] - 1) / float(image_hw[1])
    sy = (map_hw[0] - 1) / float(image_hw[0])
    return boxes * np.array([sx, sy, sx, sy])
