import itertools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from interface.base_scene_generator import BaseSceneGenerator, ContextRule, SceneConfig, SceneRecord
from util.box_ops import iou_matrix
from util.errors import SceneGenerationError

logger = logging.getLogger(__name__)

SHAPES = ["circle", "square", "triangle", "bar", "diamond", "ring"]
PALETTE = [
    (230, 80, 60),
    (70, 150, 230),
    (240, 200, 60),
    (90, 200, 110),
    (200, 90, 210),
    (240, 140, 40),
    (60, 210, 200),
    (180, 180, 180),
]
MIN_BOX_AREA = 4.0


def shape_of(name: str, index: int) -> str:
    return name if name in SHAPES else SHAPES[index % len(SHAPES)]


def box_center(box: np.ndarray) -> Tuple[float, float]:
    return 0.5 * (box[0] + box[2]), 0.5 * (box[1] + box[3])


def relation_holds(rule: ContextRule, trigger: np.ndarray, dependent: np.ndarray) -> bool:
    """Whether `dependent` sits in the rule's spatial relation to `trigger`."""
    tx, ty = box_center(trigger)
    dx, dy = box_center(dependent)
    if rule.relation == "near":
        distance = float(np.hypot(dx - tx, dy - ty))
        return rule.min_distance <= distance <= rule.max_distance
    if rule.relation == "above":
        gap = trigger[1] - dependent[3]
        return rule.min_distance <= gap <= rule.max_distance and trigger[0] <= dx <= trigger[2]
    margin = min(dependent[0] - trigger[0], dependent[1] - trigger[1], trigger[2] - dependent[2], trigger[3] - dependent[3])
    return margin >= rule.min_distance


def _exactly_present(weights: np.ndarray, present: Sequence[int], base: float, draws: int) -> float:
    """P(`draws` i.i.d. draws hit every class in `present` and otherwise only the `base` mass)."""
    total = 0.0
    for size in range(len(present) + 1):
        for subset in itertools.combinations(present, size):
            total += (-1.0) ** (len(present) - size) * (base + float(weights[list(subset)].sum())) ** draws
    return total


def accepted_frequencies(weights: np.ndarray, rules: Sequence[Tuple[int, int]], low: int, high: int) -> np.ndarray:
    """Class shares over the draws that keep every dependent with its trigger.

    Classes are drawn i.i.d. from `weights`, the count uniformly from `low..high`,
    and a draw holding a dependent without its trigger is redrawn. `rules` holds
    `(trigger, dependent)` class indices.
    """
    involved = sorted({c for rule in rules for c in rule})
    outside = np.setdiff1d(np.arange(len(weights)), involved)
    free = 1.0 - float(weights[involved].sum())
    mass = np.zeros(len(weights))
    for size in range(len(involved) + 1):
        for present in itertools.combinations(involved, size):
            if any(dependent in present and trigger not in present for trigger, dependent in rules):
                continue
            for count in range(max(low, 1), high + 1):
                mass[outside] += count * weights[outside] * _exactly_present(weights, present, free, count - 1)
                for c in present:
                    others = [o for o in present if o != c]
                    mass[c] += count * weights[c] * _exactly_present(weights, others, free + weights[c], count - 1)
    return mass / mass.sum() if mass.sum() > 0 else weights.copy()


def compensated_weights(
    target: np.ndarray, rules: Sequence[Tuple[int, int]], low: int, high: int, iterations: int = 2000, tolerance: float = 1e-9
) -> np.ndarray:
    """Draw weights whose accepted class shares equal `target`."""
    if not rules or high == 0:
        return target
    weights = target.copy()
    for _ in range(iterations):
        shares = accepted_frequencies(weights, rules, low, high)
        if np.max(np.abs(shares - target)) < tolerance:
            return weights
        ratio = np.divide(target, shares, out=np.ones_like(target), where=shares > 0)
        weights = weights * np.sqrt(ratio)
        weights = weights / weights.sum()
    logger.warning("Class draw weights did not reach the target shares; off by %.2e", np.max(np.abs(shares - target)))
    return weights


class SceneGenerator(BaseSceneGenerator):
    def __init__(self, config: SceneConfig):
        self.config = config
        self.frequencies = config.target_frequencies()
        self.dependents = {config.class_index(rule.dependent): rule for rule in config.rules}
        pairs = [(config.class_index(rule.trigger), config.class_index(rule.dependent)) for rule in config.rules]
        # draws lacking a trigger are redrawn, so dependents are drawn more often up front
        self.draw_weights = compensated_weights(self.frequencies, pairs, config.min_instances, config.max_instances)

    def generate(self, seed: int) -> SceneRecord:
        rng = np.random.default_rng(seed)
        low, high = self.config.min_instances, self.config.max_instances
        for _ in range(self.config.max_retries):
            count = int(rng.integers(low, high + 1))
            class_ids = rng.choice(len(self.config.classes), size=count, p=self.draw_weights)
            boxes = self._place(class_ids, rng)
            if boxes is not None:
                image = self._render(class_ids, boxes, rng)
                return SceneRecord(image=image, class_ids=class_ids.astype(np.int64), boxes=boxes, seed=seed, rules=list(self.config.rules))
        raise SceneGenerationError(
            f"seed {seed}: could not satisfy the rule/overlap constraints in {self.config.max_retries} attempts"
        )

    def _size(self, class_id: int, rng: np.random.Generator) -> Tuple[float, float]:
        low, high = self.config.size_range
        side = float(rng.integers(low, high + 1))
        if shape_of(self.config.classes[class_id], class_id) == "bar":
            thin = max(2.0, round(side / 3.0))
            return (side, thin) if rng.random() < 0.5 else (thin, side)
        return side, side

    def _free_box(self, w: float, h: float, rng: np.random.Generator) -> np.ndarray:
        x1 = float(rng.integers(0, int(self.config.image_w - w) + 1))
        y1 = float(rng.integers(0, int(self.config.image_h - h) + 1))
        return np.array([x1, y1, x1 + w, y1 + h])

    def _related_box(self, rule: ContextRule, trigger: np.ndarray, w: float, h: float, rng: np.random.Generator) -> np.ndarray:
        tx, ty = box_center(trigger)
        if rule.relation == "near":
            angle = rng.uniform(0.0, 2.0 * np.pi)
            distance = rng.uniform(rule.min_distance, rule.max_distance)
            cx, cy = tx + distance * np.cos(angle), ty + distance * np.sin(angle)
            x1, y1 = round(cx - w / 2.0), round(cy - h / 2.0)
        elif rule.relation == "above":
            gap = rng.uniform(rule.min_distance, rule.max_distance)
            cx = rng.uniform(trigger[0], trigger[2])
            x1, y1 = round(cx - w / 2.0), np.floor(trigger[1] - gap - h)
        else:
            span_x = trigger[2] - trigger[0] - w - 2 * rule.min_distance
            span_y = trigger[3] - trigger[1] - h - 2 * rule.min_distance
            if span_x < 0 or span_y < 0:
                return np.array([-1.0, -1.0, -1.0 + w, -1.0 + h])
            x1 = np.ceil(trigger[0] + rule.min_distance + rng.uniform(0, span_x))
            y1 = np.ceil(trigger[1] + rule.min_distance + rng.uniform(0, span_y))
        return np.array([x1, y1, x1 + w, y1 + h], dtype=np.float64)

    def _acceptable(self, box: np.ndarray, placed: List[np.ndarray]) -> bool:
        if box[0] < 0 or box[1] < 0 or box[2] > self.config.image_w or box[3] > self.config.image_h:
            return False
        if (box[2] - box[0]) * (box[3] - box[1]) < MIN_BOX_AREA:
            return False
        if placed and iou_matrix(box, np.stack(placed)).max() > self.config.max_overlap_iou:
            return False
        return True

    def _place(self, class_ids: np.ndarray, rng: np.random.Generator) -> Optional[np.ndarray]:
        """Boxes for `class_ids` in order, or None when this draw cannot be placed."""
        boxes: List[Optional[np.ndarray]] = [None] * len(class_ids)
        placed: List[np.ndarray] = []
        # triggers and free classes first, dependents next to an already placed trigger
        order = sorted(range(len(class_ids)), key=lambda i: int(class_ids[i]) in self.dependents)
        for i in order:
            class_id = int(class_ids[i])
            rule = self.dependents.get(class_id)
            triggers: List[np.ndarray] = []
            if rule is not None:
                trigger_id = self.config.class_index(rule.trigger)
                triggers = [boxes[j] for j in range(len(class_ids)) if class_ids[j] == trigger_id and boxes[j] is not None]
                if not triggers:
                    return None
            for _ in range(self.config.max_retries):
                w, h = self._size(class_id, rng)
                if rule is None:
                    candidate = self._free_box(w, h, rng)
                else:
                    anchor = triggers[int(rng.integers(len(triggers)))]
                    candidate = self._related_box(rule, anchor, w, h, rng)
                    if not relation_holds(rule, anchor, candidate):
                        continue
                if self._acceptable(candidate, placed):
                    boxes[i] = candidate
                    placed.append(candidate)
                    break
            else:
                return None
        return np.stack(boxes) if boxes else np.zeros((0, 4))

    def _color(self, class_id: int) -> Tuple[int, int, int]:
        base = np.array(PALETTE[class_id % len(PALETTE)], dtype=np.float64)
        rule = self.dependents.get(class_id)
        if rule is not None and rule.contrast < 1.0:
            background = 255.0 * self.config.background
            base = background + rule.contrast * (base - background)
        return tuple(int(round(v)) for v in base)

    def _render(self, class_ids: np.ndarray, boxes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        level = int(round(255 * self.config.background))
        canvas = Image.new("RGB", (self.config.image_w, self.config.image_h), color=(level, level, level))
        draw = ImageDraw.Draw(canvas)
        for class_id, box in zip(class_ids, boxes):
            class_id = int(class_id)
            color = self._color(class_id)
            x1, y1, x2, y2 = (int(v) for v in box)
            shape = shape_of(self.config.classes[class_id], class_id)
            corners = [x1, y1, x2 - 1, y2 - 1]
            if shape == "circle":
                draw.ellipse(corners, fill=color)
            elif shape == "ring":
                draw.ellipse(corners, outline=color, width=max(1, (x2 - x1) // 5))
            elif shape in ("square", "bar"):
                draw.rectangle(corners, fill=color)
            elif shape == "triangle":
                draw.polygon([((x1 + x2 - 1) / 2.0, y1), (x1, y2 - 1), (x2 - 1, y2 - 1)], fill=color)
            else:
                cx, cy = (x1 + x2 - 1) / 2.0, (y1 + y2 - 1) / 2.0
                draw.polygon([(cx, y1), (x2 - 1, cy), (cx, y2 - 1), (x1, cy)], fill=color)
        image = np.asarray(canvas, dtype=np.float64) / 255.0
        if self.config.noise_std > 0:
            image = image + rng.normal(0.0, self.config.noise_std, size=image.shape)
        return np.clip(image, 0.0, 1.0).astype(np.float32)

    def check_rules(self, record: SceneRecord) -> List[str]:
        """Every rule, bounds and overlap violation of `record`, as messages."""
        violations = []
        boxes = record.boxes
        for i, box in enumerate(boxes):
            if box[0] < 0 or box[1] < 0 or box[2] > self.config.image_w or box[3] > self.config.image_h:
                violations.append(f"instance {i} leaves the image")
            if (box[2] - box[0]) * (box[3] - box[1]) < MIN_BOX_AREA:
                violations.append(f"instance {i} is smaller than {MIN_BOX_AREA} px^2")
        if len(boxes) > 1:
            overlaps = iou_matrix(boxes, boxes)
            np.fill_diagonal(overlaps, 0.0)
            if overlaps.max() > self.config.max_overlap_iou + 1e-12:
                violations.append(f"pairwise IoU {overlaps.max():.3f} exceeds {self.config.max_overlap_iou}")
        for rule in self.config.rules:
            trigger_id = self.config.class_index(rule.trigger)
            dependent_id = self.config.class_index(rule.dependent)
            triggers = boxes[record.class_ids == trigger_id]
            for i in np.flatnonzero(record.class_ids == dependent_id):
                if not any(relation_holds(rule, t, boxes[i]) for t in triggers):
                    violations.append(f"instance {i} ({rule.dependent}) is not {rule.relation} any {rule.trigger}")
        return violations
