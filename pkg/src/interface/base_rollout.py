import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from interface.base_detector import BoundingBox, Detection


class RolloutConfig(BaseModel):
    # published: N = 10 roll-out steps per GPU
    iterations: int = Field(10, ge=0)
    # hybrid split; published COCO setting N1 = 50, N2 = 10
    n1: int = Field(0, ge=0)
    emission: Literal["softmax", "hardmax"] = "softmax"
    emission_floor: float = Field(0.05, ge=0.0, le=1.0)
    score_threshold: float = Field(0.0, ge=0.0, le=1.0)
    proposal_mode: Literal["nms-top-k", "non-aggressive-top-K"] = "non-aggressive-top-K"
    # "nms" runs per-class NMS over the emitted tail
    dedup_tail: Literal["none", "nms"] = "none"

    @property
    def n2(self) -> int:
        return self.iterations - self.n1

    @model_validator(mode="after")
    def _check(self) -> "RolloutConfig":
        if self.n1 > self.iterations:
            raise ValueError("n1 must be <= iterations (iterations = n1 + n2)")
        return self


@dataclass
class IterationRecord:
    iteration: int
    roi: BoundingBox
    class_scores: np.ndarray
    detections: List[Detection]
    base_logits: np.ndarray
    memory_logits: Optional[np.ndarray]
    fused_logits: np.ndarray
    memory_digest: str
    update_box: BoundingBox
    phase: str = "fused"

    def to_json(self) -> str:
        return json.dumps(
            {
                "iteration": self.iteration,
                "phase": self.phase,
                "roi": [self.roi.x1, self.roi.y1, self.roi.x2, self.roi.y2],
                "update_box": [self.update_box.x1, self.update_box.y1, self.update_box.x2, self.update_box.y2],
                "class_scores": [float(v) for v in self.class_scores],
                "detections": [d.to_dict() for d in self.detections],
                "base_logits": [float(v) for v in self.base_logits],
                "memory_logits": None if self.memory_logits is None else [float(v) for v in self.memory_logits],
                "fused_logits": [float(v) for v in self.fused_logits],
                "memory_digest": self.memory_digest,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "IterationRecord":
        data = json.loads(line)
        memory = data.get("memory_logits")
        return cls(
            iteration=int(data["iteration"]),
            roi=BoundingBox.from_array(data["roi"]),
            class_scores=np.asarray(data["class_scores"], dtype=np.float64),
            detections=[Detection.from_dict(d) for d in data["detections"]],
            base_logits=np.asarray(data["base_logits"], dtype=np.float64),
            memory_logits=None if memory is None else np.asarray(memory, dtype=np.float64),
            fused_logits=np.asarray(data["fused_logits"], dtype=np.float64),
            memory_digest=data["memory_digest"],
            update_box=BoundingBox.from_array(data["update_box"]),
            phase=data.get("phase", "fused"),
        )


@dataclass
class RolloutTrace:
    iterations: List[IterationRecord] = field(default_factory=list)
    final_memory_digest: str = ""
    # memory grids after each write, only when requested; never serialised
    snapshots: List[np.ndarray] = field(default_factory=list)

    def detections(self) -> List[Detection]:
        return [d for record in self.iterations for d in record.detections]

    def to_jsonl(self) -> str:
        return "".join(record.to_json() + "\n" for record in self.iterations)

    @classmethod
    def from_jsonl(cls, text: str) -> "RolloutTrace":
        iterations = [IterationRecord.from_json(line) for line in text.splitlines() if line.strip()]
        return cls(iterations=iterations, final_memory_digest=iterations[-1].memory_digest if iterations else "")


class BaseRollout(ABC):
    @abstractmethod
    def select_next(self, boxes: np.ndarray, class_probs: np.ndarray) -> Tuple[int, np.ndarray]:
        pass

    @abstractmethod
    def emit(self, class_probs: np.ndarray, class_boxes: np.ndarray, iteration: int) -> List[Detection]:
        pass

    @abstractmethod
    def detect_sequence(self, image: np.ndarray) -> RolloutTrace:
        pass

    @abstractmethod
    def hybrid_detect(self, image: np.ndarray) -> RolloutTrace:
        pass
