import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from autograd import Tensor, no_grad
from autograd import functional as F
from impl.context_model import ContextModel
from impl.detector import FasterRCNN, Proposals
from impl.memory import SpatialMemory
from interface.base_context_model import FusedScores, HeadScores
from interface.base_detector import BoundingBox, Detection
from interface.base_memory import MemoryState
from interface.base_rollout import BaseRollout, IterationRecord, RolloutConfig, RolloutTrace
from util.box_ops import nms_per_class

logger = logging.getLogger(__name__)

# (iteration, score vector) -> score vector written to memory instead
ScoreTransform = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class BaseOutputs:
    feature_map: Tensor
    rpn_objectness: Tensor
    rpn_deltas: Tensor


@dataclass
class RpnScores:
    m_conv: Optional[Tensor]
    objectness: HeadScores
    deltas: HeadScores


@dataclass
class IterationScores:
    """Everything one roll-out iteration scores, before selection."""

    iteration: int
    rois: np.ndarray
    proposals: Proposals
    scores: Optional[FusedScores]
    m_conv: Optional[Tensor] = None

    @property
    def fused_probs(self) -> Tensor:
        return F.softmax(self.scores.cls_logits.fused)

    def base_probs(self) -> np.ndarray:
        return F.softmax(self.scores.cls_logits.base).data.astype(np.float64)


@dataclass
class Selection:
    index: int
    probs: np.ndarray
    class_boxes: np.ndarray
    update_box: np.ndarray
    argmax: int
    detections: List[Detection] = field(default_factory=list)


def select_next(boxes: np.ndarray, class_probs: np.ndarray) -> Tuple[int, np.ndarray]:
    """
    Region with the highest foreground probability; exact ties go to the
    lexicographically smallest (x1, y1, x2, y2).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    class_probs = np.asarray(class_probs, dtype=np.float64)
    if boxes.shape[0] == 0:
        raise ValueError("select_next: empty candidate set")
    foreground = class_probs[:, 1:].max(axis=1)
    tied = np.flatnonzero(foreground == foreground.max())
    order = np.lexsort((boxes[tied, 3], boxes[tied, 2], boxes[tied, 1], boxes[tied, 0]))
    index = int(tied[order[0]])
    return index, class_probs[index]


def _passthrough(base: Tensor, memory: Optional[Tensor], iteration: int) -> HeadScores:
    return HeadScores(base=base, memory=None, fused=base)


class Rollout(BaseRollout):
    """Sequential detection: score, select the most confident box, write it to memory, repeat."""

    def __init__(
        self,
        detector: FasterRCNN,
        memory: Optional[SpatialMemory],
        context: Optional[ContextModel],
        config: RolloutConfig,
    ):
        self.detector = detector
        self.memory = memory
        self.context = context
        self.config = config

    @property
    def mlp_mode(self) -> bool:
        return self.context is not None and self.context.config.mode == "mlp"

    # -- scoring -------------------------------------------------------------

    def base_outputs(self, image: np.ndarray) -> BaseOutputs:
        fmap = self.detector.backbone_forward(self.detector.image_tensor(image))
        objectness, deltas = self.detector.rpn_forward(fmap)
        return BaseOutputs(fmap, objectness, deltas)

    def init_state(self, base: BaseOutputs) -> Optional[MemoryState]:
        if self.memory is None:
            return None
        return self.memory.init_memory(*base.feature_map.shape[:2])

    def _fuse(self, base: Tensor, memory: Optional[Tensor], iteration: int) -> HeadScores:
        return self.context.fuse(base, memory, iteration) if self.context is not None else _passthrough(base, memory, iteration)

    def score_rpn(self, base: BaseOutputs, state: Optional[MemoryState], iteration: int) -> RpnScores:
        """Context features (when memory is in use) and fused first-stage outputs."""
        context = self.context
        m_conv = memory_objectness = memory_deltas = None
        if context is not None and context.uses_memory(iteration):
            source = F.stop_gradient(base.feature_map) if self.mlp_mode else state.grid
            m_conv = context.context_forward(source)
            memory_objectness, memory_deltas = context.memory_rpn(m_conv)
        return RpnScores(
            m_conv=m_conv,
            objectness=self._fuse(base.rpn_objectness, memory_objectness, iteration),
            deltas=self._fuse(base.rpn_deltas, memory_deltas, iteration),
        )

    def score_regions(self, base: BaseOutputs, m_conv: Optional[Tensor], iteration: int, rois: np.ndarray) -> Tuple[HeadScores, HeadScores]:
        """Fused (logits, deltas) of the second stage over `rois`."""
        regions = self.detector.classify_rois(base.feature_map, rois)
        memory_logits = memory_deltas = None
        if m_conv is not None:
            features = F.stop_gradient(regions.features) if self.context.stops_base(iteration) else regions.features
            memory_logits, memory_deltas = self.context.memory_classifier(m_conv, rois, features)
        return self._fuse(regions.cls_logits, memory_logits, iteration), self._fuse(regions.cls_deltas, memory_deltas, iteration)

    def score_iteration(
        self,
        base: BaseOutputs,
        state: Optional[MemoryState],
        iteration: int,
        proposal_mode: Optional[str] = None,
        extra_rois: Optional[np.ndarray] = None,
    ) -> IterationScores:
        """Fused RPN and classification scores at `iteration`; `extra_rois` are appended to the proposals."""
        rpn = self.score_rpn(base, state, iteration)
        proposals = self.detector.proposal_boxes(rpn.objectness.fused.data, rpn.deltas.fused.data, proposal_mode or self.config.proposal_mode)
        rois = proposals.boxes
        if extra_rois is not None and len(extra_rois):
            rois = np.concatenate([rois, np.asarray(extra_rois, dtype=np.float64).reshape(-1, 4)], axis=0)
        if rois.shape[0] == 0:
            return IterationScores(iteration, rois, proposals, None, rpn.m_conv)
        cls_logits, cls_deltas = self.score_regions(base, rpn.m_conv, iteration, rois)
        scores = FusedScores(rpn_objectness=rpn.objectness, rpn_deltas=rpn.deltas, cls_logits=cls_logits, cls_deltas=cls_deltas)
        return IterationScores(iteration, rois, proposals, scores, rpn.m_conv)

    # -- selection and emission ----------------------------------------------

    def select_next(self, boxes: np.ndarray, class_probs: np.ndarray) -> Tuple[int, np.ndarray]:
        return select_next(boxes, class_probs)

    def emit(self, class_probs: np.ndarray, class_boxes: np.ndarray, iteration: int) -> List[Detection]:
        """
        hardmax: the argmax class alone (nothing when it is background);
        softmax: every foreground class at or above the emission floor.
        """
        class_probs = np.asarray(class_probs, dtype=np.float64)
        class_boxes = np.asarray(class_boxes, dtype=np.float64).reshape(-1, 4)
        threshold = self.config.score_threshold
        if self.config.emission == "hardmax":
            best = int(class_probs.argmax())
            if best == 0 or class_probs[best] < threshold:
                return []
            return [Detection(BoundingBox.from_array(class_boxes[best - 1]), best - 1, float(class_probs[best]), iteration)]
        floor = max(self.config.emission_floor, threshold)
        classes = [c for c in np.argsort(-class_probs[1:], kind="stable") if class_probs[c + 1] >= floor]
        return [Detection(BoundingBox.from_array(class_boxes[c]), int(c), float(class_probs[c + 1]), iteration) for c in classes]

    def select(self, scored: IterationScores, probs: np.ndarray) -> Selection:
        index, row = select_next(scored.rois, probs)
        deltas = scored.scores.cls_deltas.fused.data[index]
        class_boxes = self.detector.class_boxes(scored.rois[index : index + 1], deltas)[0]
        best = int(row.argmax())
        update_box = scored.rois[index]
        if best > 0:
            candidate = class_boxes[best - 1]
            # a regressed box clipped flat against the border cannot address the memory
            if min(candidate[2] - candidate[0], candidate[3] - candidate[1]) >= self.detector.config.min_box_size:
                update_box = candidate
        return Selection(index, row, class_boxes, np.asarray(update_box, dtype=np.float64), best, self.emit(row, class_boxes, scored.iteration))

    # -- roll-outs -----------------------------------------------------------

    def _score_tensor(self, row: np.ndarray) -> Tensor:
        return Tensor(np.asarray(row, dtype=self.detector.params.dtype))

    def _fused_steps(
        self,
        base: BaseOutputs,
        state: Optional[MemoryState],
        start: int,
        count: int,
        trace: RolloutTrace,
        score_transform: Optional[ScoreTransform],
        keep_snapshots: bool,
        proposal_mode: Optional[str] = None,
    ) -> Optional[MemoryState]:
        for iteration in range(start, start + count):
            scored = self.score_iteration(base, state, iteration, proposal_mode)
            if scored.rois.shape[0] == 0:
                logger.warning("No proposals at iteration %d; stopping the roll-out", iteration)
                break
            probs = scored.fused_probs.data.astype(np.float64)
            choice = self.select(scored, probs)
            written = choice.probs if score_transform is None else np.asarray(score_transform(iteration, choice.probs), dtype=np.float64)
            if self.memory is not None:
                state = self.memory.write_box(state, choice.update_box, base.feature_map, self._score_tensor(written))
            memory = scored.scores.cls_logits.memory
            trace.iterations.append(
                IterationRecord(
                    iteration=iteration,
                    roi=BoundingBox.from_array(scored.rois[choice.index]),
                    class_scores=written,
                    detections=choice.detections,
                    base_logits=scored.scores.cls_logits.base.data[choice.index].astype(np.float64),
                    memory_logits=None if memory is None else memory.data[choice.index].astype(np.float64),
                    fused_logits=scored.scores.cls_logits.fused.data[choice.index].astype(np.float64),
                    memory_digest=state.digest() if state is not None else "",
                    update_box=BoundingBox.from_array(choice.update_box),
                )
            )
            if keep_snapshots and state is not None:
                trace.snapshots.append(state.grid.data.copy())
        return state

    def detect_sequence(
        self,
        image: np.ndarray,
        score_transform: Optional[ScoreTransform] = None,
        keep_snapshots: bool = False,
        iterations: Optional[int] = None,
        proposal_mode: Optional[str] = None,
    ) -> RolloutTrace:
        count = self.config.iterations if iterations is None else iterations
        trace = RolloutTrace()
        if count == 0:
            return trace
        with no_grad():
            base = self.base_outputs(image)
            state = self._fused_steps(base, self.init_state(base), 0, count, trace, score_transform, keep_snapshots, proposal_mode)
        trace.final_memory_digest = state.digest() if state is not None else ""
        return trace

    def hybrid_detect(
        self,
        image: np.ndarray,
        score_transform: Optional[ScoreTransform] = None,
        keep_snapshots: bool = False,
        proposal_mode: Optional[str] = None,
    ) -> RolloutTrace:
        """
        The first n1 detections come from the detector's per-class NMS ranking
        and are only written to memory; the remaining n2 iterations run fused.
        """
        n1 = self.config.n1
        if n1 == 0:
            return self.detect_sequence(image, score_transform, keep_snapshots, proposal_mode=proposal_mode)
        mode = proposal_mode or self.config.proposal_mode
        trace = RolloutTrace()
        with no_grad():
            base = self.base_outputs(image)
            state = self.init_state(base)
            candidates = self.detector.candidates_from_features(base.feature_map, base.rpn_objectness, base.rpn_deltas, mode, self.config.emission)
            for iteration, detection in enumerate(candidates.detections[:n1]):
                row = candidates.score_rows[iteration]
                written = row if score_transform is None else np.asarray(score_transform(iteration, row), dtype=np.float64)
                box = detection.box.as_array()
                if self.memory is not None:
                    state = self.memory.write_box(state, box, base.feature_map, self._score_tensor(written))
                trace.iterations.append(
                    IterationRecord(
                        iteration=iteration,
                        roi=detection.box,
                        class_scores=written,
                        detections=[Detection(detection.box, detection.class_id, detection.confidence, iteration)],
                        base_logits=candidates.logit_rows[iteration],
                        memory_logits=None,
                        fused_logits=candidates.logit_rows[iteration],
                        memory_digest=state.digest() if state is not None else "",
                        update_box=detection.box,
                        phase="base",
                    )
                )
                if keep_snapshots and state is not None:
                    trace.snapshots.append(state.grid.data.copy())
            start = len(trace.iterations)
            state = self._fused_steps(base, state, start, self.config.n2, trace, score_transform, keep_snapshots, proposal_mode)
        trace.final_memory_digest = state.digest() if state is not None else ""
        return trace

    def run(self, image: np.ndarray, proposal_mode: Optional[str] = None) -> RolloutTrace:
        return self.hybrid_detect(image, proposal_mode=proposal_mode) if self.config.n1 else self.detect_sequence(image, proposal_mode=proposal_mode)

    def trace_detections(self, trace: RolloutTrace) -> List[Detection]:
        """Emitted detections, per-class NMS'd when the tail policy asks for it."""
        detections = trace.detections()
        if self.config.dedup_tail == "none" or not detections:
            return detections
        boxes = np.stack([d.box.as_array() for d in detections])
        keep = nms_per_class(boxes, np.array([d.confidence for d in detections]), np.array([d.class_id for d in detections]), self.detector.config.nms_iou)
        return [detections[k] for k in keep]

    def single_pass_detect(self, image: np.ndarray, proposal_mode: Optional[str] = None, emission: str = "softmax") -> List[Detection]:
        """Baseline protocol over fused scores; used for the MLP context baseline."""
        with no_grad():
            base = self.base_outputs(image)
            scored = self.score_iteration(base, None, 0, proposal_mode or self.config.proposal_mode)
            if scored.rois.shape[0] == 0:
                return []
            candidates = self.detector.select_detections(scored.rois, scored.scores.cls_logits.fused.data, scored.scores.cls_deltas.fused.data, emission)
        return candidates.detections

    def replay(self, trace: RolloutTrace, image: np.ndarray) -> str:
        """Re-apply every recorded memory write and return the final memory digest."""
        if self.memory is None:
            return ""
        with no_grad():
            base = self.base_outputs(image)
            state = self.init_state(base)
            for record in trace.iterations:
                state = self.memory.write_box(state, record.update_box.as_array(), base.feature_map, self._score_tensor(record.class_scores))
        return state.digest()
