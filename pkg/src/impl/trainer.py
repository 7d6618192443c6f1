import csv
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autograd import Tensor, no_grad, precision
from autograd import functional as F
from impl.context_model import ContextModel
from impl.detector import BOX_DELTA_STDS, FasterRCNN
from impl.memory import SpatialMemory
from impl.params import SGD, ParameterStore
from impl.rollout import BaseOutputs, IterationScores, Rollout
from interface.base_context_model import FusedScores
from interface.base_scene_generator import SceneRecord
from interface.base_trainer import FLIPPED, IGNORE, NEGATIVE, POSITIVE, BaseTrainer, IterationTargets, LossBreakdown
from util.box_ops import as_boxes, encode, iou_matrix
from util.config import RunConfig
from util.errors import CheckpointError, NumericalError
from util.tensor_io import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

BASE_CHECKPOINT = "base.smnc"
SMN_CHECKPOINT = "smn.smnc"
MLP_CHECKPOINT = "mlp.smnc"

RPN_SIGMA = 3.0
CLS_SIGMA = 1.0
RETIRE_IOU = 0.5
LOG_COLUMNS = ["step", "lr", "rpn_cls", "rpn_reg", "cls", "cls_reg", "reconstruction", "dedup", "base_cls", "total", "wall_time"]


def checkpoint_digest(config: RunConfig, kind: str) -> str:
    sections = {"base": ("detector",), "smn": ("detector", "memory", "context"), "mlp": ("detector", "context")}
    if kind not in sections:
        raise ValueError(f"Unknown checkpoint kind '{kind}'")
    return config.digest(*sections[kind])


# -- targets -----------------------------------------------------------------


def assign_iteration_targets(
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    retired: np.ndarray,
    boxes: np.ndarray,
    positive_iou: float,
    negative_iou: Optional[float] = None,
    match_best: bool = False,
) -> IterationTargets:
    """
    Label `boxes` against the ground truth given which instances are already
    retired. Positive: IoU >= positive_iou with a remaining instance (or, with
    `match_best`, the best box of a remaining instance). Flipped: otherwise
    IoU >= positive_iou with a retired instance. Everything else is negative,
    except the (negative_iou, positive_iou) band which is ignored when
    `negative_iou` is given.
    """
    boxes = as_boxes(boxes)
    gt_boxes = as_boxes(gt_boxes)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    retired = np.asarray(retired, dtype=bool).reshape(-1)
    count = boxes.shape[0]
    kinds = np.full(count, NEGATIVE, dtype=np.int64)
    labels = np.zeros(count, dtype=np.int64)
    matched = np.full(count, -1, dtype=np.int64)
    box_targets = np.zeros((count, 4))
    recon_labels = np.zeros(count, dtype=np.int64)
    recon_matched = np.full(count, -1, dtype=np.int64)
    if gt_boxes.shape[0] == 0 or count == 0:
        return IterationTargets(kinds, labels, matched, box_targets, retired, recon_labels, recon_matched)

    overlaps = iou_matrix(boxes, gt_boxes)
    live = np.where(~retired[None, :], overlaps, -1.0)
    dead = np.where(retired[None, :], overlaps, -1.0)
    live_gt, live_best = live.argmax(axis=1), live.max(axis=1)
    dead_gt, dead_best = dead.argmax(axis=1), dead.max(axis=1)

    positive = live_best >= positive_iou
    if match_best and (~retired).any():
        gt_best = live.max(axis=0)
        hits = (live == gt_best[None, :]) & (gt_best[None, :] > 0) & ~retired[None, :]
        positive |= hits.any(axis=1)
    flipped = ~positive & (dead_best >= positive_iou)
    negative = ~positive & ~flipped
    if negative_iou is not None:
        negative &= overlaps.max(axis=1) < negative_iou

    kinds[:] = IGNORE
    kinds[positive] = POSITIVE
    kinds[flipped] = FLIPPED
    kinds[negative] = NEGATIVE
    labels[positive] = gt_classes[live_gt[positive]] + 1
    matched[positive] = live_gt[positive]
    matched[flipped] = dead_gt[flipped]
    if positive.any():
        box_targets[positive] = encode(gt_boxes[live_gt[positive]], boxes[positive])

    remembered = dead_best >= positive_iou
    recon_labels[remembered] = gt_classes[dead_gt[remembered]] + 1
    recon_matched[remembered] = dead_gt[remembered]
    return IterationTargets(kinds, labels, matched, box_targets, retired.copy(), recon_labels, recon_matched)


def retire_matched(gt_boxes: np.ndarray, gt_classes: np.ndarray, retired: np.ndarray, box: np.ndarray, class_id: int) -> np.ndarray:
    """Retire the best remaining same-class instance the detection covers at IoU >= 0.5."""
    retired = np.asarray(retired, dtype=bool).copy()
    if class_id < 0 or len(retired) == 0:
        return retired
    overlaps = iou_matrix(box, gt_boxes)[0]
    candidates = (~retired) & (np.asarray(gt_classes) == class_id) & (overlaps >= RETIRE_IOU)
    if candidates.any():
        retired[np.flatnonzero(candidates)[overlaps[candidates].argmax()]] = True
    return retired


def _draw(rng: np.random.Generator, pool: np.ndarray, count: int) -> np.ndarray:
    count = min(int(count), pool.size)
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(pool, size=count, replace=False)


def sample_rois(
    kinds: np.ndarray,
    ratios: Sequence[float],
    size: int,
    rng: np.random.Generator,
    sample_flipped: bool = True,
) -> np.ndarray:
    """
    Stratified positive : flipped : negative draw of at most `size` indices.
    Short strata backfill from the negatives. With `sample_flipped` off the
    flipped regions join the negative pool and share its quota.
    """
    if size <= 0:
        raise ValueError("sample size must be positive")
    kinds = np.asarray(kinds)
    positives = np.flatnonzero(kinds == POSITIVE)
    flipped = np.flatnonzero(kinds == FLIPPED)
    negatives = np.flatnonzero(kinds == NEGATIVE)
    pos_ratio, flip_ratio, neg_ratio = (float(r) for r in ratios)
    if not sample_flipped:
        negatives = np.sort(np.concatenate([flipped, negatives]))
        flipped = np.zeros(0, dtype=np.int64)
        flip_ratio, neg_ratio = 0.0, flip_ratio + neg_ratio
    total = pos_ratio + flip_ratio + neg_ratio
    taken_pos = _draw(rng, positives, int(size * pos_ratio / total))
    taken_flip = _draw(rng, flipped, int(size * flip_ratio / total))
    taken_neg = _draw(rng, negatives, size - taken_pos.size - taken_flip.size)
    return np.sort(np.concatenate([taken_pos, taken_flip, taken_neg]).astype(np.int64))


# -- losses ------------------------------------------------------------------


def rpn_losses(
    objectness: Tensor, deltas: Tensor, slots: np.ndarray, targets: IterationTargets, sampled: np.ndarray, label_kinds=(POSITIVE,)
) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """Objectness BCE over the sampled anchors and smooth-L1 over their positives."""
    if sampled.size == 0:
        return None, None
    labels = np.isin(targets.kinds[sampled], label_kinds).astype(np.float64)
    cls_loss = F.sigmoid_bce(F.index(objectness, slots[sampled]), labels)
    positives = sampled[targets.kinds[sampled] == POSITIVE]
    if positives.size == 0:
        return cls_loss, None
    reg_loss = F.smooth_l1(
        F.index(deltas, slots[positives]), targets.box_targets[positives], normalizer=float(sampled.size), sigma=RPN_SIGMA
    )
    return cls_loss, reg_loss


def classification_losses(
    logits: Tensor, deltas: Tensor, targets: IterationTargets, sampled: np.ndarray, num_classes: int
) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """(C + 1)-way CE over the sampled regions (rows of `logits`) and per-class box regression on positives."""
    if sampled.size == 0:
        return None, None
    labels = targets.labels[sampled]
    cls_loss = F.softmax_cross_entropy(logits, labels)
    rows = np.flatnonzero(targets.kinds[sampled] == POSITIVE)
    if rows.size == 0:
        return cls_loss, None
    per_class = F.reshape(deltas, (deltas.shape[0], num_classes, 4))
    chosen = F.index(per_class, (rows, labels[rows] - 1))
    reg_loss = F.smooth_l1(chosen, targets.box_targets[sampled[rows]] / BOX_DELTA_STDS, normalizer=float(sampled.size), sigma=CLS_SIGMA)
    return cls_loss, reg_loss


def cross_entropy_value(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        return 0.0
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(logits.shape[0]), labels].mean())


class TrainingLog:
    """CSV loss curve: one row per optimizer step."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        self._writer.writeheader()
        self._start = time.perf_counter()

    def write(self, step: int, lr: float, losses: LossBreakdown) -> None:
        row = {name: 0.0 for name in LOG_COLUMNS}
        row.update(losses.terms)
        row.update(step=step, lr=lr, wall_time=round(time.perf_counter() - self._start, 3))
        self._writer.writerow(row)
        self._file.flush()

    def close(self) -> None:
        self._file.close()


def _scalar_terms(terms: Dict[str, Optional[Tensor]]) -> Dict[str, float]:
    return {name: float(value.data) for name, value in terms.items() if value is not None}


class Trainer(BaseTrainer):
    """
    Base detector training, then roll-out training of the memory branch by
    back-propagation through the unrolled chain of memory writes.
    """

    def __init__(
        self,
        config: RunConfig,
        params: ParameterStore,
        detector: FasterRCNN,
        memory: Optional[SpatialMemory] = None,
        context: Optional[ContextModel] = None,
    ):
        self.config = config
        self.train_config = config.train
        self.params = params
        self.detector = detector
        self.memory = memory
        self.context = context
        self.rollout = Rollout(detector, memory, context, config.rollout)
        self.rng = np.random.default_rng((config.seed, config.train.seed))
        self.global_step = 0
        self._optimizer: Optional[SGD] = None

    # -- shared --------------------------------------------------------------

    @property
    def kind(self) -> str:
        if self.context is None:
            return "base"
        return "mlp" if self.context.config.mode == "mlp" else "smn"

    @property
    def checkpoint_name(self) -> str:
        return {"base": BASE_CHECKPOINT, "smn": SMN_CHECKPOINT, "mlp": MLP_CHECKPOINT}[self.kind]

    def trainable_prefixes(self) -> List[str]:
        if self.kind == "base":
            return [f"{self.detector.prefix}/"]
        prefixes = [f"{self.kind}/"]
        if self.context.trains_base:
            prefixes.append(f"{self.detector.prefix}/")
        return prefixes

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [pair for prefix in self.trainable_prefixes() for pair in self.params.tensors(prefix)]

    @property
    def optimizer(self) -> SGD:
        if self._optimizer is None:
            self._optimizer = SGD(self.trainable(), momentum=self.train_config.momentum, weight_decay=self.train_config.weight_decay)
        return self._optimizer

    def save(self, out_dir: Union[str, Path]) -> Path:
        state: Dict[str, np.ndarray] = {}
        for prefix in self.trainable_prefixes():
            state.update(self.params.state_dict(prefix))
        path = Path(out_dir) / self.checkpoint_name
        save_checkpoint(path, state, checkpoint_digest(self.config, self.kind))
        logger.debug("Saved %d tensors to %s at step %d", len(state), path, self.global_step)
        return path

    def load(self, path: Union[str, Path]) -> None:
        tensors = load_checkpoint(path, checkpoint_digest(self.config, self.kind))
        for prefix in self.trainable_prefixes():
            self.params.load_state_dict(tensors, prefix)

    def sample_batch(self, records: Sequence[SceneRecord]) -> List[SceneRecord]:
        size = self.train_config.batch_images
        indices = self.rng.choice(len(records), size=size, replace=len(records) < size)
        return [records[int(i)] for i in indices]

    def _apply(self, total: Optional[Tensor], terms: Dict[str, float], step: int) -> LossBreakdown:
        optimizer = self.optimizer
        if total is None:
            # nothing in the chain carries a loss: leave the weights alone
            return LossBreakdown(terms)
        value = float(total.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite training loss {value} at step {step}", op="train", step=step)
        optimizer.zero_grad()
        total.backward()
        optimizer.step(self.train_config.lr_at(step))
        terms["total"] = value
        return LossBreakdown(terms)

    @staticmethod
    def _accumulate(totals: Dict[str, float], terms: Dict[str, float], weight: float) -> None:
        for name, value in terms.items():
            totals[name] = totals.get(name, 0.0) + weight * value

    # -- base stage ----------------------------------------------------------

    def _base_losses(self, record: SceneRecord) -> Dict[str, Optional[Tensor]]:
        cfg = self.detector.config
        detector = self.detector
        fmap = detector.backbone_forward(detector.image_tensor(record.image))
        objectness, deltas = detector.rpn_forward(fmap)
        nothing_retired = np.zeros(record.num_instances, dtype=bool)

        anchors, slots = detector.anchors("train")
        anchor_targets = assign_iteration_targets(
            record.boxes, record.class_ids, nothing_retired, anchors, cfg.rpn_positive_iou, cfg.rpn_negative_iou, match_best=True
        )
        fraction = cfg.rpn_positive_fraction
        sampled = sample_rois(anchor_targets.kinds, (fraction, 0.0, 1.0 - fraction), cfg.rpn_batch, self.rng)
        rpn_cls, rpn_reg = rpn_losses(objectness, deltas, slots, anchor_targets, sampled)

        proposals = detector.proposal_boxes(objectness.data, deltas.data, "nms-top-k")
        rois = np.concatenate([proposals.boxes, as_boxes(record.boxes)], axis=0)
        region_targets = assign_iteration_targets(record.boxes, record.class_ids, nothing_retired, rois, cfg.cls_positive_iou)
        fraction = cfg.roi_positive_fraction
        sampled = sample_rois(region_targets.kinds, (fraction, 0.0, 1.0 - fraction), cfg.roi_batch, self.rng)
        cls_loss = cls_reg = None
        if sampled.size:
            regions = detector.classify_rois(fmap, rois[sampled])
            cls_loss, cls_reg = classification_losses(regions.cls_logits, regions.cls_deltas, region_targets, sampled, detector.num_classes)
        return {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "cls": cls_loss, "cls_reg": cls_reg}

    def _weighted_total(self, terms: Dict[str, Optional[Tensor]]) -> Optional[Tensor]:
        parts = [F.scale(value, self.train_config.weight(name)) for name, value in terms.items() if value is not None]
        return F.add_all(parts)

    def base_train_step(self, batch: Sequence[SceneRecord], step: int) -> LossBreakdown:
        totals: Dict[str, float] = {}
        parts = []
        with precision(self.params.dtype):
            for record in batch:
                terms = self._base_losses(record)
                self._accumulate(totals, _scalar_terms(terms), 1.0 / len(batch))
                image_total = self._weighted_total(terms)
                if image_total is not None:
                    parts.append(F.scale(image_total, 1.0 / len(batch)))
            return self._apply(F.add_all(parts), totals, step)

    def train_base(self, records: Sequence[SceneRecord], out_dir: Union[str, Path], steps: Optional[int] = None) -> Path:
        if not records:
            raise ValueError("train_base needs a non-empty dataset")
        out_dir = Path(out_dir)
        steps = self.train_config.base_steps if steps is None else steps
        log = TrainingLog(out_dir / "train_base.csv")
        logger.info("Training the base detector for %d steps on %d scenes", steps, len(records))
        try:
            for _ in range(steps):
                step = self.global_step
                losses = self.base_train_step(self.sample_batch(records), step)
                log.write(step, self.train_config.lr_at(step), losses)
                self.global_step += 1
                if self.global_step % self.train_config.checkpoint_every == 0:
                    self.save(out_dir)
                    logger.info("step %d: loss %.4f", step, losses.total)
        finally:
            log.close()
        return self.save(out_dir)

    # -- roll-out stage ------------------------------------------------------

    @property
    def first_loss_iteration(self) -> int:
        """Design (d) leaves iteration 0 to the frozen detector."""
        context = self.context
        return 1 if context.config.mode == "smn" and context.config.design == "d" else 0

    def _image_chain(self, record: SceneRecord, unroll: int) -> Tuple[List[Tensor], Dict[str, float]]:
        """Unroll one image; returns the weighted loss tensors and the scalar terms averaged over the iterations that carry losses."""
        train = self.train_config
        cfg = self.detector.config
        detector, context, rollout = self.detector, self.context, self.rollout
        gt_boxes, gt_classes = as_boxes(record.boxes), np.asarray(record.class_ids)
        retired = np.zeros(record.num_instances, dtype=bool)
        anchors, slots = detector.anchors("train")
        first = self.first_loss_iteration
        recon = self.kind == "smn" and train.reconstruction_weight > 0

        if context.trains_base:
            base = rollout.base_outputs(record.image)
        else:
            with no_grad():
                base = rollout.base_outputs(record.image)
        state = rollout.init_state(base)

        losses: List[Tensor] = []
        totals: Dict[str, float] = {}
        counted = 0
        for n in range(unroll):
            scoring = n >= first
            if not scoring and n == unroll - 1:
                break
            rpn = rollout.score_rpn(base, state, n)
            anchor_targets = assign_iteration_targets(
                gt_boxes, gt_classes, retired, anchors, cfg.rpn_positive_iou, cfg.rpn_negative_iou, match_best=True
            )
            proposals = detector.proposal_boxes(rpn.objectness.fused.data, rpn.deltas.fused.data, self.config.rollout.proposal_mode)
            rois = np.concatenate([proposals.boxes, gt_boxes], axis=0)
            region_targets = assign_iteration_targets(gt_boxes, gt_classes, retired, rois, cfg.cls_positive_iou)
            sampled = sample_rois(region_targets.kinds, train.cls_ratios, train.roi_sample_size, self.rng, train.sample_flipped)
            if sampled.size == 0:
                break
            sampled_rois = rois[sampled]
            cls_logits, cls_deltas = rollout.score_regions(base, rpn.m_conv, n, sampled_rois)

            if scoring:
                anchor_sample = sample_rois(anchor_targets.kinds, train.rpn_ratios, train.rpn_sample_size, self.rng, train.sample_flipped)
                rpn_cls, rpn_reg = rpn_losses(rpn.objectness.fused, rpn.deltas.fused, slots, anchor_targets, anchor_sample)
                cls_loss, cls_reg = classification_losses(cls_logits.fused, cls_deltas.fused, region_targets, sampled, detector.num_classes)
                terms = {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "cls": cls_loss, "cls_reg": cls_reg}
                image_total = self._weighted_total(terms)
                scalars = _scalar_terms(terms)
                if recon and rpn.m_conv is not None:
                    reconstruction = self._reconstruction_loss(rpn.m_conv, slots, anchor_targets, anchor_sample, region_targets, sampled, sampled_rois)
                    scalars["reconstruction"] = float(reconstruction.data)
                    image_total = F.add_all([t for t in (image_total, reconstruction) if t is not None])
                flipped_rows = np.flatnonzero(region_targets.kinds[sampled] == FLIPPED)
                scalars["dedup"] = cross_entropy_value(cls_logits.fused.data[flipped_rows], np.zeros(flipped_rows.size, dtype=np.int64))
                scalars["base_cls"] = cross_entropy_value(cls_logits.base.data, region_targets.labels[sampled])
                if image_total is not None:
                    losses.append(image_total)
                self._accumulate(totals, scalars, 1.0)
                counted += 1

            if n == unroll - 1:
                break
            probs = F.softmax(cls_logits.fused).data.astype(np.float64)
            scored = IterationScores(
                n, sampled_rois, proposals, FusedScores(rpn.objectness, rpn.deltas, cls_logits, cls_deltas), rpn.m_conv
            )
            choice = rollout.select(scored, probs)
            if self.memory is not None:
                state = self.memory.write_box(state, choice.update_box, base.feature_map, Tensor(choice.probs.astype(self.params.dtype)))
            retired = retire_matched(gt_boxes, gt_classes, retired, choice.update_box, choice.argmax - 1)

        if counted:
            totals = {name: value / counted for name, value in totals.items()}
        return losses, totals

    def _reconstruction_loss(
        self,
        m_conv: Tensor,
        slots: np.ndarray,
        anchor_targets: IterationTargets,
        anchor_sample: np.ndarray,
        region_targets: IterationTargets,
        sampled: np.ndarray,
        sampled_rois: np.ndarray,
    ) -> Tensor:
        """Memory alone must recover what has been written: retired instances as foreground."""
        heads = self.context.reconstruction_heads(m_conv, sampled_rois)
        parts = []
        if anchor_sample.size:
            remembered = (anchor_targets.recon_labels[anchor_sample] > 0).astype(np.float64)
            parts.append(F.sigmoid_bce(F.index(heads.rpn_objectness, slots[anchor_sample]), remembered))
        parts.append(F.softmax_cross_entropy(heads.cls_logits, region_targets.recon_labels[sampled]))
        return F.scale(F.add_all(parts), self.train_config.reconstruction_weight)

    def smn_train_step(self, batch: Sequence[SceneRecord], unroll: int, step: int) -> LossBreakdown:
        if self.context is None:
            raise ValueError("roll-out training needs a context model")
        totals: Dict[str, float] = {}
        parts = []
        with precision(self.params.dtype):
            for record in batch:
                losses, terms = self._image_chain(record, unroll)
                self._accumulate(totals, terms, 1.0 / len(batch))
                if losses:
                    parts.append(F.scale(F.add_all(losses), 1.0 / len(batch)))
            return self._apply(F.add_all(parts), totals, step)

    def curriculum_train(
        self,
        records: Sequence[SceneRecord],
        out_dir: Union[str, Path],
        schedule: Optional[List[Tuple[int, int]]] = None,
        init_checkpoint: Optional[Union[str, Path]] = None,
    ) -> Path:
        """
        Run each (N, steps) stage in order. Weights, optimizer momentum, the
        sampling stream and the step counter carry from one stage to the next.
        """
        if not records:
            raise ValueError("curriculum_train needs a non-empty dataset")
        schedule = list(schedule if schedule is not None else self.train_config.curriculum)
        if [n for n, _ in schedule] != sorted(n for n, _ in schedule):
            raise ValueError("curriculum schedule must be non-decreasing in N")
        if init_checkpoint is not None:
            try:
                self.load(init_checkpoint)
            except CheckpointError as e:
                raise CheckpointError(f"cannot bootstrap from {init_checkpoint}: {e}")
        out_dir = Path(out_dir)
        log = TrainingLog(out_dir / f"train_{self.kind}.csv")
        base_before = self.params.checksum(f"{self.detector.prefix}/")
        try:
            for stage, (unroll, steps) in enumerate(schedule):
                logger.info("Stage %d: N=%d for %d steps", stage, unroll, steps)
                for _ in range(steps):
                    step = self.global_step
                    losses = self.smn_train_step(self.sample_batch(records), unroll, step)
                    log.write(step, self.train_config.lr_at(step), losses)
                    self.global_step += 1
                    if self.global_step % self.train_config.checkpoint_every == 0:
                        self.save(out_dir)
                        logger.info("step %d: loss %.4f", step, losses.total)
        finally:
            log.close()
        if not self.context.trains_base and self.params.checksum(f"{self.detector.prefix}/") != base_before:
            raise NumericalError("base detector weights changed during roll-out training", op="curriculum_train")
        return self.save(out_dir)
