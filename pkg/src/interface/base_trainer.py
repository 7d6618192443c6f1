from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from interface.base_scene_generator import SceneRecord

# RoI label kinds
IGNORE = -1
NEGATIVE = 0
POSITIVE = 1
FLIPPED = 2


class TrainConfig(BaseModel):
    # published: 30k steps, lr 1e-3 -> 1e-4 after 20k
    steps: int = Field(3000, gt=0)
    base_steps: int = Field(3000, gt=0)
    learning_rate: float = Field(1e-3, ge=0.0)
    lr_decay_step: int = Field(2000, ge=0)
    lr_decay_factor: float = Field(0.1, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    batch_images: int = Field(2, ge=1)
    unroll: int = Field(2, ge=1)
    rpn_sample_size: int = Field(64, gt=0)
    roi_sample_size: int = Field(32, gt=0)
    # positive : flipped : negative
    rpn_ratios: Tuple[int, int, int] = (2, 1, 1)
    cls_ratios: Tuple[int, int, int] = (1, 1, 2)
    # off reproduces the "SMN Base" ablation row: flipped regions compete with negatives
    sample_flipped: bool = True
    reconstruction_weight: float = Field(1.0, ge=0.0)
    loss_weights: Dict[str, float] = Field(
        default_factory=lambda: {"rpn_cls": 1.0, "rpn_reg": 1.0, "cls": 1.0, "cls_reg": 1.0}
    )
    # (N, steps) stages; each starts from the previous stage's weights
    curriculum: List[Tuple[int, int]] = Field(default_factory=lambda: [(2, 1000), (4, 1000), (10, 1000)])
    checkpoint_every: int = Field(500, ge=1)
    seed: int = Field(0, ge=0)
    precision: str = "float32"
    # fan-in scaled Gaussian init multiplier for every weight
    init_scale: float = Field(1.0, gt=0.0)

    @field_validator("rpn_ratios", "cls_ratios")
    @classmethod
    def _positive_ratios(cls, value):
        if any(int(v) != v or v < 0 for v in value) or sum(value) <= 0:
            raise ValueError("ratios must be non-negative integers with a positive sum")
        return tuple(int(v) for v in value)

    @field_validator("precision")
    @classmethod
    def _known_precision(cls, value: str) -> str:
        if value not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        return value

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        for unroll, steps in self.curriculum:
            if unroll < 1 or steps < 1:
                raise ValueError("curriculum stages need N >= 1 and steps >= 1")
        stages = [n for n, _ in self.curriculum]
        if stages != sorted(stages):
            raise ValueError("curriculum must be non-decreasing in N")
        unknown = set(self.loss_weights) - {"rpn_cls", "rpn_reg", "cls", "cls_reg"}
        if unknown:
            raise ValueError(f"unknown loss weight(s): {sorted(unknown)}")
        return self

    def lr_at(self, step: int) -> float:
        if self.lr_decay_step and step >= self.lr_decay_step:
            return self.learning_rate * self.lr_decay_factor
        return self.learning_rate

    def weight(self, term: str) -> float:
        return self.loss_weights.get(term, 1.0)


@dataclass
class IterationTargets:
    """
    Labels of R regions against the ground truth of one image at one roll-out
    iteration. A ground truth is retired once a previous selection matched it;
    regions that would be positive for a retired instance are FLIPPED.
    """

    kinds: np.ndarray
    labels: np.ndarray
    matched_gt: np.ndarray
    box_targets: np.ndarray
    retired: np.ndarray
    recon_labels: np.ndarray
    recon_matched_gt: np.ndarray


@dataclass
class LossBreakdown:
    terms: Dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.terms.get("total", 0.0))

    def __getitem__(self, name: str) -> float:
        return self.terms[name]


class BaseTrainer(ABC):
    @abstractmethod
    def train_base(self, records: Sequence[SceneRecord], out_dir: Union[str, Path]) -> Path:
        pass

    @abstractmethod
    def smn_train_step(self, batch: Sequence[SceneRecord], unroll: int, step: int) -> LossBreakdown:
        pass

    @abstractmethod
    def curriculum_train(
        self, records: Sequence[SceneRecord], out_dir: Union[str, Path], schedule: Optional[List[Tuple[int, int]]] = None
    ) -> Path:
        pass
