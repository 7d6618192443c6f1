from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from autograd import Tensor


class ContextConfig(BaseModel):
    # "smn" reasons over the memory; "mlp" stacks the same net on the backbone features
    mode: Literal["smn", "mlp"] = "smn"
    # de-duplication design; (d) keeps the memory out of iteration 0
    design: Literal["a", "b", "c", "d"] = "d"
    # published: 5 layers of 3x3x256 with residuals every two layers
    depth: int = Field(5, ge=1)
    kernel: int = Field(3, ge=1)
    channels: int = Field(16, ge=1)
    residual_period: int = Field(2, ge=1)
    # published: 2048-d memory fc layers
    fc_dim: int = Field(64, ge=1)
    head_init_scale: float = Field(0.1, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "ContextConfig":
        if self.depth < self.residual_period:
            raise ValueError("depth must be >= residual_period")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        return self


@dataclass
class HeadScores:
    base: Tensor
    memory: Optional[Tensor]
    fused: Tensor


@dataclass
class FusedScores:
    """Base, memory and fused (= base + memory) logits for each output head."""

    rpn_objectness: HeadScores
    rpn_deltas: HeadScores
    cls_logits: HeadScores
    cls_deltas: HeadScores


@dataclass
class MemoryLogits:
    rpn_objectness: Tensor
    rpn_deltas: Tensor
    cls_logits: Tensor
    cls_deltas: Tensor


class BaseContextModel(ABC):
    @abstractmethod
    def context_forward(self, grid: Tensor) -> Tensor:
        pass

    @abstractmethod
    def memory_rpn(self, m_conv: Tensor) -> Tuple[Tensor, Tensor]:
        pass

    @abstractmethod
    def memory_classifier(self, m_conv: Tensor, rois: np.ndarray, base_features: Tensor) -> Tuple[Tensor, Tensor]:
        pass

    @abstractmethod
    def reconstruction_heads(self, m_conv: Tensor, rois: np.ndarray) -> MemoryLogits:
        pass

    @abstractmethod
    def fuse(self, base: Tensor, memory: Optional[Tensor], iteration: int) -> HeadScores:
        pass
