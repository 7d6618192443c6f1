"""
Read-outs of what the memory changes: scores on an instance that has
already been written, whether memory alone can recover written instances,
and per-iteration base versus fused confidences.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from autograd import Tensor, no_grad
from autograd import functional as F
from impl.rollout import Rollout
from impl.trainer import retire_matched
from interface.base_rollout import RolloutTrace
from interface.base_scene_generator import SceneRecord
from util.box_ops import as_boxes, iou_matrix

logger = logging.getLogger(__name__)

DEDUP_FUSED_CEILING = 0.3
DEDUP_BASE_FLOOR = 0.5


@dataclass
class DedupProbe:
    """Per scene: scores on the first correctly detected instance, one iteration later."""

    fused_scores: List[float] = field(default_factory=list)
    base_scores: List[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def scenes(self) -> int:
        return len(self.fused_scores)

    @property
    def suppressed_fraction(self) -> float:
        if not self.fused_scores:
            return 0.0
        fused, base = np.array(self.fused_scores), np.array(self.base_scores)
        return float(np.mean((fused < DEDUP_FUSED_CEILING) & (base > DEDUP_BASE_FLOOR)))

    def summary(self) -> Dict[str, float]:
        return {
            "scenes": self.scenes,
            "skipped": self.skipped,
            "suppressed_fraction": self.suppressed_fraction,
            "mean_fused": float(np.mean(self.fused_scores)) if self.fused_scores else 0.0,
            "mean_base": float(np.mean(self.base_scores)) if self.base_scores else 0.0,
        }


def dedup_probe(rollout: Rollout, records: Sequence[SceneRecord], iou_threshold: float = 0.5) -> DedupProbe:
    """
    Detect once; if the selection is a correct detection, score again with
    the memory holding it and take the max probability of the instance's
    class over regions overlapping it at `iou_threshold`.
    """
    if rollout.memory is None:
        raise ValueError("dedup_probe needs a memory-backed roll-out")
    probe = DedupProbe()
    with no_grad():
        for record in records:
            if record.num_instances == 0:
                probe.skipped += 1
                continue
            gt_boxes, gt_classes = as_boxes(record.boxes), np.asarray(record.class_ids)
            base = rollout.base_outputs(record.image)
            state = rollout.init_state(base)
            scored = rollout.score_iteration(base, state, 0, extra_rois=gt_boxes)
            choice = rollout.select(scored, scored.fused_probs.data.astype(np.float64))
            retired = retire_matched(gt_boxes, gt_classes, np.zeros(len(gt_boxes), dtype=bool), choice.update_box, choice.argmax - 1)
            if not retired.any():
                probe.skipped += 1
                continue
            instance = int(np.flatnonzero(retired)[0])
            state = rollout.memory.write_box(state, choice.update_box, base.feature_map, Tensor(choice.probs.astype(rollout.detector.params.dtype)))
            after = rollout.score_iteration(base, state, 1, extra_rois=gt_boxes[instance : instance + 1])
            overlapping = np.flatnonzero(iou_matrix(after.rois, gt_boxes[instance])[:, 0] >= iou_threshold)
            column = int(gt_classes[instance]) + 1
            probe.fused_scores.append(float(after.fused_probs.data[overlapping, column].max()))
            probe.base_scores.append(float(after.base_probs()[overlapping, column].max()))
    logger.info("De-duplication probe: %d scenes, %.1f%% suppressed", probe.scenes, 100 * probe.suppressed_fraction)
    return probe


def reconstruction_recall(rollout: Rollout, records: Sequence[SceneRecord], iterations: Optional[int] = None) -> float:
    """
    Share of instances the roll-out wrote to memory that the reconstruction
    heads, reading memory alone, classify correctly at their boxes.
    """
    context = rollout.context
    if rollout.memory is None or context is None or context.config.mode != "smn":
        raise ValueError("reconstruction_recall needs the memory model")
    count = rollout.config.iterations if iterations is None else iterations
    written = recovered = 0
    with no_grad():
        for record in records:
            gt_boxes, gt_classes = as_boxes(record.boxes), np.asarray(record.class_ids)
            if gt_boxes.shape[0] == 0:
                continue
            base = rollout.base_outputs(record.image)
            state = rollout.init_state(base)
            retired = np.zeros(len(gt_boxes), dtype=bool)
            for n in range(count):
                scored = rollout.score_iteration(base, state, n)
                if scored.rois.shape[0] == 0:
                    break
                choice = rollout.select(scored, scored.fused_probs.data.astype(np.float64))
                state = rollout.memory.write_box(state, choice.update_box, base.feature_map, Tensor(choice.probs.astype(rollout.detector.params.dtype)))
                retired = retire_matched(gt_boxes, gt_classes, retired, choice.update_box, choice.argmax - 1)
            if not retired.any():
                continue
            heads = context.reconstruction_heads(context.context_forward(state.grid), gt_boxes[retired])
            predicted = F.softmax(heads.cls_logits).data.argmax(axis=1)
            written += int(retired.sum())
            recovered += int(np.sum(predicted == gt_classes[retired] + 1))
    return recovered / written if written else 0.0


def score_readoff(trace: RolloutTrace) -> List[Dict[str, object]]:
    """Per iteration: selected box, top class, and its base / fused probability and their change."""
    rows = []
    for record in trace.iterations:
        base = F.softmax(Tensor(record.base_logits)).data
        fused = F.softmax(Tensor(record.fused_logits)).data
        top = int(fused.argmax())
        rows.append(
            {
                "iteration": record.iteration,
                "phase": record.phase,
                "box": [round(v, 2) for v in record.roi.as_array()],
                "class": top - 1,
                "base": float(base[top]),
                "fused": float(fused[top]),
                "delta": float(fused[top] - base[top]),
                "memory_used": record.memory_logits is not None,
            }
        )
    return rows
