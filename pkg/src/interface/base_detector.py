from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from autograd import Tensor


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_array(cls, values) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)


@dataclass
class RoI:
    box: BoundingBox
    objectness: float


@dataclass
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float
    iteration: int = 0

    def to_dict(self) -> dict:
        return {
            "box": [self.box.x1, self.box.y1, self.box.x2, self.box.y2],
            "class_id": self.class_id,
            "confidence": self.confidence,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Detection":
        return cls(BoundingBox.from_array(data["box"]), int(data["class_id"]), float(data["confidence"]), int(data.get("iteration", 0)))


class DetectorConfig(BaseModel):
    # gamma = 1 / feature_stride; published: 1/16 of the image
    feature_stride: int = Field(4, ge=1)
    backbone_channels: int = Field(32, ge=1)
    # published: 3 scales x 3 ratios over a dense window grid
    anchor_scales: List[float] = Field(default_factory=lambda: [8.0, 16.0])
    anchor_ratios: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    # published: k = 300 after NMS
    proposals_k: int = Field(64, ge=1)
    # published: top 5k regions without NMS
    proposals_top: int = Field(512, ge=1)
    num_classes: Optional[int] = Field(None, ge=2)
    nms_iou: float = Field(0.5, gt=0.0, le=1.0)
    rpn_nms_iou: float = Field(0.7, gt=0.0, le=1.0)
    # published: 7x7 RoI pooling
    pool_size: int = Field(7, ge=1)
    # published: 4096-d fc6/fc7 (VGG16)
    fc_dim: int = Field(64, ge=1)
    min_box_size: float = Field(1.0, ge=0.0)
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    cls_positive_iou: float = 0.5
    rpn_batch: int = Field(64, ge=1)
    rpn_positive_fraction: float = Field(0.5, gt=0.0, le=1.0)
    roi_batch: int = Field(32, ge=1)
    # foreground:background = 1:3
    roi_positive_fraction: float = Field(0.25, gt=0.0, le=1.0)
    detections_per_image: int = Field(100, ge=1)
    score_floor: float = Field(0.01, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self) -> "DetectorConfig":
        if self.rpn_negative_iou > self.rpn_positive_iou:
            raise ValueError("rpn_negative_iou must be <= rpn_positive_iou")
        return self

    @property
    def anchors_per_location(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def map_size(self, image_h: int, image_w: int) -> Tuple[int, int]:
        return image_h // self.feature_stride, image_w // self.feature_stride

    def total_anchors(self, image_h: int, image_w: int) -> int:
        map_h, map_w = self.map_size(image_h, image_w)
        return map_h * map_w * self.anchors_per_location


@dataclass
class RegionScores:
    """Second-stage outputs for R regions."""

    boxes: np.ndarray
    cls_logits: Tensor
    cls_deltas: Tensor
    features: Tensor


class BaseDetector(ABC):
    @abstractmethod
    def backbone_forward(self, image: Tensor) -> Tensor:
        pass

    @abstractmethod
    def rpn_forward(self, feature_map: Tensor) -> Tuple[Tensor, Tensor]:
        pass

    @abstractmethod
    def propose(self, logits: np.ndarray, deltas: np.ndarray, mode: str) -> List[RoI]:
        pass

    @abstractmethod
    def classify_rois(self, feature_map: Tensor, rois: np.ndarray) -> RegionScores:
        pass

    @abstractmethod
    def detect(self, image: np.ndarray, mode: str = "nms-top-k") -> List[Detection]:
        pass
