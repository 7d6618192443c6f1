import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass

from pydantic import BaseModel, Field

from autograd import Tensor
from interface.base_detector import Detection


class MemoryConfig(BaseModel):
    # published: 20x20 prior grid of 256-d cells, 14x14 patches
    prior_h: int = Field(8, ge=1)
    prior_w: int = Field(8, ge=1)
    depth: int = Field(16, ge=1)
    patch: int = Field(7, ge=2)


@dataclass
class MemoryState:
    """Memory grid h' x w' x D (values in [-1, 1]) after `iteration` writes."""

    grid: Tensor
    iteration: int = 0

    def digest(self) -> str:
        return hashlib.sha256(self.grid.data.tobytes()).hexdigest()


class BaseMemory(ABC):
    @abstractmethod
    def init_memory(self, map_h: int, map_w: int) -> MemoryState:
        pass

    @abstractmethod
    def build_input_features(self, conv_patch: Tensor, class_scores: Tensor) -> Tensor:
        pass

    @abstractmethod
    def gru_write(self, old_patch: Tensor, input_patch: Tensor) -> Tensor:
        pass

    @abstractmethod
    def memory_update(self, state: MemoryState, detection: Detection, feature_map: Tensor, class_scores: Tensor) -> MemoryState:
        pass
