import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from autograd import Tensor, no_grad
from autograd import functional as F
from impl.params import ParameterStore
from interface.base_detector import BaseDetector, BoundingBox, Detection, DetectorConfig, RegionScores, RoI
from util.box_ops import build_anchors, clip_boxes, decode, nms, nms_per_class, score_order, to_map_coords
from util.errors import ShapeError

logger = logging.getLogger(__name__)

# classification-stage regression targets are divided by these
BOX_DELTA_STDS = np.array([0.1, 0.1, 0.2, 0.2])
BACKBONE_LAYERS = 4
HEAD_INIT_SCALE = 0.1


def backbone_strides(feature_stride: int) -> List[int]:
    """Stride of each backbone conv; log2(feature_stride) of them downsample."""
    halvings = int(np.log2(feature_stride))
    if 2**halvings != feature_stride or halvings > BACKBONE_LAYERS:
        raise ShapeError("backbone", "feature_stride", f"power of two <= {2**BACKBONE_LAYERS}", feature_stride)
    strides = [1] * BACKBONE_LAYERS
    for position in [1, 3, 0, 2][:halvings]:
        strides[position] = 2
    return strides


@dataclass
class Proposals:
    boxes: np.ndarray
    scores: np.ndarray
    slots: np.ndarray

    def as_rois(self) -> List[RoI]:
        return [RoI(BoundingBox.from_array(b), float(s)) for b, s in zip(self.boxes, self.scores)]


@dataclass
class BaseCandidates:
    """Baseline detections with the score vector of the region each came from."""

    detections: List[Detection]
    score_rows: np.ndarray
    logit_rows: np.ndarray


def init_rpn_head(params: ParameterStore, prefix: str, channels: int, anchors: int, rng: np.random.Generator, scale: float = 1.0) -> None:
    params.gaussian(f"{prefix}/conv/w", (3, 3, channels, channels), 9 * channels, rng, scale)
    params.zeros(f"{prefix}/conv/b", (channels,))
    params.gaussian(f"{prefix}/cls/w", (1, 1, channels, anchors), channels, rng, HEAD_INIT_SCALE * scale)
    params.zeros(f"{prefix}/cls/b", (anchors,))
    params.gaussian(f"{prefix}/reg/w", (1, 1, channels, 4 * anchors), channels, rng, HEAD_INIT_SCALE * scale)
    params.zeros(f"{prefix}/reg/b", (4 * anchors,))


def rpn_head(params: ParameterStore, prefix: str, fmap: Tensor) -> Tuple[Tensor, Tensor]:
    """3x3 mapping layer, then 1x1 objectness and 1x1 delta siblings, flattened per anchor slot."""
    hidden = F.relu(F.conv2d(fmap, params[f"{prefix}/conv/w"], params[f"{prefix}/conv/b"]))
    logits = F.conv2d(hidden, params[f"{prefix}/cls/w"], params[f"{prefix}/cls/b"])
    deltas = F.conv2d(hidden, params[f"{prefix}/reg/w"], params[f"{prefix}/reg/b"])
    return F.reshape(logits, (-1,)), F.reshape(deltas, (-1, 4))


def init_fc(params: ParameterStore, prefix: str, d_in: int, d_out: int, rng: np.random.Generator, scale: float = 1.0) -> None:
    params.gaussian(f"{prefix}/w", (d_in, d_out), d_in, rng, scale)
    params.zeros(f"{prefix}/b", (d_out,))


def fc(params: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return F.fully_connected(x, params[f"{prefix}/w"], params[f"{prefix}/b"])


class FasterRCNN(BaseDetector):
    """
    Two-stage detector: conv backbone, anchor RPN, RoI max pooling into two
    fc layers with a (C + 1)-way classifier and per-class box regressors.
    """

    def __init__(
        self,
        config: DetectorConfig,
        image_hw: Tuple[int, int],
        params: ParameterStore,
        rng: Optional[np.random.Generator] = None,
        init_scale: float = 1.0,
        prefix: str = "base",
    ):
        if config.num_classes is None:
            raise ValueError("DetectorConfig.num_classes must be set")
        self.config = config
        self.image_hw = image_hw
        self.map_hw = config.map_size(*image_hw)
        self.params = params
        self.prefix = prefix
        self.num_classes = config.num_classes
        self.strides = backbone_strides(config.feature_stride)
        self._anchors: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        if f"{prefix}/conv1/w" not in params:
            self._init_params(rng if rng is not None else np.random.default_rng(0), init_scale)

    def _init_params(self, rng: np.random.Generator, scale: float) -> None:
        c = self.config.backbone_channels
        channels = [3, max(c // 2, 1), c, c, c]
        for i in range(BACKBONE_LAYERS):
            self.params.gaussian(f"{self.prefix}/conv{i + 1}/w", (3, 3, channels[i], channels[i + 1]), 9 * channels[i], rng, scale)
            self.params.zeros(f"{self.prefix}/conv{i + 1}/b", (channels[i + 1],))
        init_rpn_head(self.params, f"{self.prefix}/rpn", c, self.config.anchors_per_location, rng, scale)
        pooled = self.config.pool_size**2 * c
        init_fc(self.params, f"{self.prefix}/fc6", pooled, self.config.fc_dim, rng, scale)
        init_fc(self.params, f"{self.prefix}/fc7", self.config.fc_dim, self.config.fc_dim, rng, scale)
        init_fc(self.params, f"{self.prefix}/cls", self.config.fc_dim, self.num_classes + 1, rng, HEAD_INIT_SCALE * scale)
        init_fc(self.params, f"{self.prefix}/bbox", self.config.fc_dim, 4 * self.num_classes, rng, HEAD_INIT_SCALE * scale)
        logger.debug("Initialised %d detector parameters", self.params.count(self.prefix))

    # -- first stage ---------------------------------------------------------

    def image_tensor(self, image: np.ndarray) -> Tensor:
        return Tensor(np.asarray(image, dtype=self.params.dtype))

    def backbone_forward(self, image: Tensor) -> Tensor:
        height, width = image.shape[:2]
        stride = self.config.feature_stride
        if height % stride or width % stride:
            raise ShapeError("backbone_forward", "image extent", f"multiple of {stride}", (height, width))
        x = image
        for i, step in enumerate(self.strides):
            x = F.relu(F.conv2d(x, self.params[f"{self.prefix}/conv{i + 1}/w"], self.params[f"{self.prefix}/conv{i + 1}/b"], stride=step))
        return x

    def rpn_forward(self, feature_map: Tensor) -> Tuple[Tensor, Tensor]:
        return rpn_head(self.params, f"{self.prefix}/rpn", feature_map)

    def anchors(self, mode: str) -> Tuple[np.ndarray, np.ndarray]:
        """(anchors, slots); `train` drops border crossers, `inference` clips them."""
        if mode not in self._anchors:
            self._anchors[mode] = build_anchors(
                self.map_hw[0], self.map_hw[1], self.config.anchor_scales, self.config.anchor_ratios,
                self.config.feature_stride, self.image_hw[0], self.image_hw[1], mode=mode,
            )
        return self._anchors[mode]

    def proposal_boxes(self, logits: np.ndarray, deltas: np.ndarray, mode: str) -> Proposals:
        anchors, slots = self.anchors("inference")
        logits = np.asarray(logits).reshape(-1)
        deltas = np.asarray(deltas).reshape(-1, 4)
        if logits.shape[0] != anchors.shape[0]:
            raise ShapeError("propose", "anchor slots", anchors.shape[0], logits.shape[0])
        boxes = clip_boxes(decode(deltas, anchors), *self.image_hw)
        valid = ((boxes[:, 2] - boxes[:, 0]) >= self.config.min_box_size) & ((boxes[:, 3] - boxes[:, 1]) >= self.config.min_box_size)
        valid &= (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        candidates = np.flatnonzero(valid)
        scores = logits[candidates]
        if mode == "nms-top-k":
            keep = nms(boxes[candidates], scores, self.config.rpn_nms_iou)[: self.config.proposals_k]
        elif mode == "non-aggressive-top-K":
            keep = score_order(scores)[: self.config.proposals_top]
        else:
            raise ValueError(f"Unknown proposal mode '{mode}'")
        chosen = candidates[keep]
        return Proposals(boxes=boxes[chosen], scores=logits[chosen], slots=slots[chosen])

    def propose(self, logits: np.ndarray, deltas: np.ndarray, mode: str) -> List[RoI]:
        return self.proposal_boxes(logits, deltas, mode).as_rois()

    # -- second stage --------------------------------------------------------

    def map_rois(self, rois: np.ndarray) -> np.ndarray:
        """Image boxes to feature-map cells for RoI pooling, in the memory's align-corners convention."""
        return to_map_coords(rois, self.image_hw, self.map_hw)

    def region_features(self, feature_map: Tensor, rois: np.ndarray) -> Tensor:
        pooled = F.roi_max_pool(feature_map, self.map_rois(rois), self.config.pool_size)
        flat = F.reshape(pooled, (pooled.shape[0], -1))
        hidden = F.relu(fc(self.params, f"{self.prefix}/fc6", flat))
        return F.relu(fc(self.params, f"{self.prefix}/fc7", hidden))

    def classify_rois(self, feature_map: Tensor, rois: np.ndarray) -> RegionScores:
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        features = self.region_features(feature_map, rois)
        logits = fc(self.params, f"{self.prefix}/cls", features)
        deltas = fc(self.params, f"{self.prefix}/bbox", features)
        return RegionScores(boxes=rois, cls_logits=logits, cls_deltas=deltas, features=features)

    def class_boxes(self, rois: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        """R x C x 4 regressed, clipped boxes, one per foreground class."""
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        count = rois.shape[0]
        per_class = np.asarray(deltas, dtype=np.float64).reshape(count * self.num_classes, 4) * BOX_DELTA_STDS
        repeated = np.repeat(rois, self.num_classes, axis=0)
        boxes = clip_boxes(decode(per_class, repeated), *self.image_hw)
        return boxes.reshape(count, self.num_classes, 4)

    # -- baseline inference --------------------------------------------------

    def base_candidates(self, image: np.ndarray, mode: str = "nms-top-k", emission: str = "softmax") -> BaseCandidates:
        with no_grad():
            fmap = self.backbone_forward(self.image_tensor(image))
            logits, deltas = self.rpn_forward(fmap)
            return self.candidates_from_features(fmap, logits, deltas, mode, emission)

    def candidates_from_features(self, fmap: Tensor, logits: Tensor, deltas: Tensor, mode: str, emission: str) -> BaseCandidates:
        with no_grad():
            proposals = self.proposal_boxes(logits.data, deltas.data, mode)
            if proposals.boxes.shape[0] == 0:
                empty = np.zeros((0, self.num_classes + 1))
                return BaseCandidates([], empty, empty)
            regions = self.classify_rois(fmap, proposals.boxes)
        return self.select_detections(proposals.boxes, regions.cls_logits.data, regions.cls_deltas.data, emission)

    def select_detections(self, rois: np.ndarray, logits: np.ndarray, deltas: np.ndarray, emission: str) -> BaseCandidates:
        """Score floor, optional per-region argmax, then per-class NMS and the per-image cap."""
        logits = np.asarray(logits, dtype=np.float64)
        probs = F.softmax(Tensor(logits)).data
        boxes = self.class_boxes(rois, deltas)
        fg = probs[:, 1:]
        if emission == "hardmax":
            mask = np.zeros_like(fg, dtype=bool)
            best = probs.argmax(axis=1)
            rows = np.flatnonzero(best > 0)
            mask[rows, best[rows] - 1] = True
        elif emission == "softmax":
            mask = np.ones_like(fg, dtype=bool)
        else:
            raise ValueError(f"Unknown emission mode '{emission}'")
        mask &= fg >= self.config.score_floor
        roi_index, class_index = np.nonzero(mask)
        cand_boxes = boxes[roi_index, class_index]
        cand_scores = fg[roi_index, class_index]
        keep = nms_per_class(cand_boxes, cand_scores, class_index, self.config.nms_iou)[: self.config.detections_per_image]
        detections = [
            Detection(BoundingBox.from_array(cand_boxes[k]), int(class_index[k]), float(cand_scores[k]), 0) for k in keep
        ]
        rows = roi_index[keep] if keep.size else np.zeros(0, dtype=np.int64)
        return BaseCandidates(detections, probs[rows], logits[rows])

    def detect(self, image: np.ndarray, mode: str = "nms-top-k", emission: str = "softmax") -> List[Detection]:
        return self.base_candidates(image, mode, emission).detections
