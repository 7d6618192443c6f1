from abc import ABC, abstractmethod
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from interface.base_detector import Detection

# column order of every results CSV
METRIC_COLUMNS = ["AP", "AP50", "AP75", "APs", "APm", "APl", "AR10", "ARs", "ARm", "ARl", "mAP50"]


class Protocol(BaseModel):
    """One evaluation setting of the comparison tables."""

    name: str
    # detections per image; the roll-out length for sequential methods
    cap: int = Field(10, ge=1)
    emission: Literal["softmax", "hardmax"] = "softmax"
    proposal_mode: Literal["nms-top-k", "non-aggressive-top-K"] = "non-aggressive-top-K"


def _default_protocols() -> List[Protocol]:
    return [
        Protocol(name="N10-softmax", cap=10, emission="softmax", proposal_mode="non-aggressive-top-K"),
        Protocol(name="N10-hardmax", cap=10, emission="hardmax", proposal_mode="non-aggressive-top-K"),
        Protocol(name="N10-softmax-nms", cap=10, emission="softmax", proposal_mode="nms-top-k"),
    ]


class EvalConfig(BaseModel):
    iou_thresholds: List[float] = Field(default_factory=lambda: [round(0.5 + 0.05 * i, 2) for i in range(10)])
    max_detections: int = Field(100, ge=1)
    ar_detections: int = Field(10, ge=1)
    # COCO 32^2 / 96^2 scaled by (64/640)^2 and rounded
    area_small: float = Field(64.0, gt=0.0)
    area_medium: float = Field(256.0, gt=0.0)
    recall_points: int = Field(101, ge=2)
    protocols: List[Protocol] = Field(default_factory=_default_protocols)
    # instances / images used by the de-duplication and reconstruction probes
    probe_iou: float = Field(0.5, gt=0.0, lt=1.0)
    probe_images: int = Field(200, ge=1)

    @field_validator("iou_thresholds")
    @classmethod
    def _increasing(cls, value: List[float]) -> List[float]:
        if not value or any(t <= 0.0 or t >= 1.0 for t in value):
            raise ValueError("IoU thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("IoU thresholds must be strictly increasing")
        return value

    @model_validator(mode="after")
    def _check(self) -> "EvalConfig":
        if self.area_medium <= self.area_small:
            raise ValueError("area_medium must exceed area_small")
        return self

    def area_ranges(self) -> Dict[str, Tuple[float, float]]:
        return {
            "all": (0.0, float("inf")),
            "small": (0.0, self.area_small),
            "medium": (self.area_small, self.area_medium),
            "large": (self.area_medium, float("inf")),
        }


class EvalResult(BaseModel):
    method: str = ""
    protocol: str = ""
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    ar10: float = 0.0
    ar_small: float = 0.0
    ar_medium: float = 0.0
    ar_large: float = 0.0
    map50: float = 0.0
    per_class_ap50: Dict[int, float] = Field(default_factory=dict)

    def row(self) -> Dict[str, float]:
        values = [
            self.ap, self.ap50, self.ap75, self.ap_small, self.ap_medium, self.ap_large,
            self.ar10, self.ar_small, self.ar_medium, self.ar_large, self.map50,
        ]
        return dict(zip(METRIC_COLUMNS, values))


class BaseEvaluator(ABC):
    @abstractmethod
    def evaluate(
        self,
        detections: Sequence[Sequence[Detection]],
        ground_truths: Sequence[Tuple[np.ndarray, np.ndarray]],
        max_detections: Optional[int] = None,
    ) -> EvalResult:
        pass
