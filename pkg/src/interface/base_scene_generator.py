from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator


class ContextRule(BaseModel):
    """Every `dependent` instance is placed in `relation` to some `trigger` instance."""

    trigger: str
    dependent: str
    relation: Literal["near", "above", "inside"] = "near"
    min_distance: float = Field(0.0, ge=0.0)
    max_distance: float = Field(16.0, gt=0.0)
    contrast: float = Field(1.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self) -> "ContextRule":
        if self.dependent == self.trigger:
            raise ValueError("dependent class must differ from trigger class")
        if self.max_distance < self.min_distance:
            raise ValueError("max_distance must be >= min_distance")
        return self


class SceneConfig(BaseModel):
    # stand-in for COCO trainval35k / minival
    image_h: int = Field(64, ge=8)
    image_w: int = Field(64, ge=8)
    classes: List[str] = Field(default_factory=lambda: ["circle", "square", "triangle", "bar"])
    class_weights: Optional[List[float]] = None
    min_instances: int = Field(1, ge=0)
    max_instances: int = Field(6, ge=0)
    max_overlap_iou: float = Field(0.3, ge=0.0, le=1.0)
    size_range: Tuple[int, int] = (6, 22)
    noise_std: float = Field(0.02, ge=0.0)
    background: float = Field(0.15, ge=0.0, le=1.0)
    rules: List[ContextRule] = Field(default_factory=list)
    max_retries: int = Field(500, ge=1)
    # records per split written by gen-data
    train_images: int = Field(2000, ge=1)
    test_images: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "SceneConfig":
        if len(self.classes) < 2:
            raise ValueError("at least two classes are required")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if self.min_instances > self.max_instances:
            raise ValueError("min_instances must be <= max_instances")
        if self.class_weights is not None:
            if len(self.class_weights) != len(self.classes) or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
                raise ValueError("class_weights must be non-negative, one per class, with a positive sum")
        low, high = self.size_range
        if low < 2 or high < low or high > min(self.image_h, self.image_w):
            raise ValueError("size_range must satisfy 2 <= low <= high <= image extent")
        for rule in self.rules:
            for name in (rule.trigger, rule.dependent):
                if name not in self.classes:
                    raise ValueError(f"rule references unknown class '{name}'")
        return self

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def target_frequencies(self) -> np.ndarray:
        weights = np.ones(len(self.classes)) if self.class_weights is None else np.asarray(self.class_weights, float)
        return weights / weights.sum()


@dataclass
class SceneRecord:
    """Synthetic image (H x W x 3 in [0, 1]) with its ground-truth instances."""

    image: np.ndarray
    class_ids: np.ndarray
    boxes: np.ndarray
    seed: int
    rules: List[ContextRule] = field(default_factory=list)

    @property
    def num_instances(self) -> int:
        return int(self.class_ids.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.boxes, other.boxes)
        )


class BaseSceneGenerator(ABC):
    @abstractmethod
    def generate(self, seed: int) -> SceneRecord:
        pass

    @abstractmethod
    def check_rules(self, record: SceneRecord) -> List[str]:
        pass
