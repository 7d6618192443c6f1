import logging
from typing import Optional, Tuple

import numpy as np

from autograd import Tensor
from autograd import functional as F
from impl.params import ParameterStore
from interface.base_detector import Detection
from interface.base_memory import BaseMemory, MemoryConfig, MemoryState
from util.box_ops import to_map_coords

logger = logging.getLogger(__name__)

GRU_KERNEL = 3


def gru_blend(old: Tensor, z: Tensor, candidate: Tensor) -> Tensor:
    """(1 - z) * old + z * candidate."""
    return F.add(F.mul(F.affine(z, -1.0, 1.0), old), F.mul(z, candidate))


class SpatialMemory(BaseMemory):
    """
    Memory grid aligned with the feature map. A write reads the old patch
    under the detection, fuses the patch features with the detection's score
    vector, runs a convolutional GRU and scatters the result back.
    """

    def __init__(
        self,
        config: MemoryConfig,
        feature_channels: int,
        num_scores: int,
        image_hw: Tuple[int, int],
        params: ParameterStore,
        rng: Optional[np.random.Generator] = None,
        init_scale: float = 1.0,
        prefix: str = "smn/memory",
    ):
        self.config = config
        self.feature_channels = feature_channels
        self.num_scores = num_scores
        self.image_hw = image_hw
        self.params = params
        self.prefix = prefix
        if f"{prefix}/prior" not in params:
            self._init_params(rng if rng is not None else np.random.default_rng(0), init_scale)
        self._no_bias = np.zeros(config.depth, dtype=params.dtype)

    def _init_params(self, rng: np.random.Generator, scale: float) -> None:
        d, k = self.config.depth, GRU_KERNEL
        p = self.prefix
        # zero prior: inside [-1, 1] and symmetric
        self.params.zeros(f"{p}/prior", (self.config.prior_h, self.config.prior_w, d))
        fused_in = self.feature_channels + self.num_scores
        self.params.gaussian(f"{p}/input1/w", (1, 1, fused_in, d), fused_in, rng, scale)
        self.params.zeros(f"{p}/input1/b", (d,))
        self.params.gaussian(f"{p}/input2/w", (1, 1, d, d), d, rng, scale)
        self.params.zeros(f"{p}/input2/b", (d,))
        for gate in ("z", "r", "h"):
            self.params.gaussian(f"{p}/gru/w{gate}", (k, k, d, d), k * k * d, rng, scale)
            self.params.gaussian(f"{p}/gru/u{gate}", (k, k, d, d), k * k * d, rng, scale)
            self.params.zeros(f"{p}/gru/b{gate}", (d,))

    def _param(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}/{name}"]

    def init_memory(self, map_h: int, map_w: int) -> MemoryState:
        return MemoryState(grid=F.bilinear_resize(self._param("prior"), map_h, map_w), iteration=0)

    def build_input_features(self, conv_patch: Tensor, class_scores: Tensor) -> Tensor:
        total = float(np.sum(class_scores.data))
        if class_scores.data.ndim != 1 or abs(total - 1.0) > 1e-6:
            raise ValueError(f"class scores must be a normalised score vector, got sum {total:.6f}")
        height, width = conv_patch.shape[:2]
        tiled = F.tile_spatial(class_scores, height, width)
        stacked = F.concat([conv_patch, tiled], axis=-1)
        hidden = F.relu(F.conv2d(stacked, self._param("input1/w"), self._param("input1/b")))
        return F.relu(F.conv2d(hidden, self._param("input2/w"), self._param("input2/b")))

    def gru_gates(self, old_patch: Tensor, input_patch: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Update gate z, reset gate r and the candidate state."""
        if old_patch.shape != input_patch.shape:
            raise ValueError(f"gru_write: patch shapes differ {old_patch.shape} vs {input_patch.shape}")
        no_bias = Tensor(self._no_bias.astype(old_patch.dtype))

        def gate(name: str, hidden: Tensor) -> Tensor:
            return F.add(
                F.conv2d(input_patch, self._param(f"gru/w{name}"), self._param(f"gru/b{name}")),
                F.conv2d(hidden, self._param(f"gru/u{name}"), no_bias),
            )

        z = F.sigmoid(gate("z", old_patch))
        r = F.sigmoid(gate("r", old_patch))
        candidate = F.tanh(gate("h", F.mul(r, old_patch)))
        return z, r, candidate

    def gru_write(self, old_patch: Tensor, input_patch: Tensor) -> Tensor:
        z, _, candidate = self.gru_gates(old_patch, input_patch)
        return gru_blend(old_patch, z, candidate)

    def map_box(self, box: np.ndarray, map_hw: Tuple[int, int]) -> np.ndarray:
        return to_map_coords(box, self.image_hw, map_hw)[0]

    def write_box(self, state: MemoryState, box: np.ndarray, feature_map: Tensor, class_scores: Tensor) -> MemoryState:
        grid = state.grid
        map_hw = grid.shape[:2]
        if feature_map.shape[:2] != map_hw:
            raise ValueError(f"memory grid {map_hw} is not aligned with the feature map {feature_map.shape[:2]}")
        cells = self.map_box(box, map_hw)
        size = self.config.patch
        conv_patch = F.roi_read(feature_map, cells, size, size)
        old_patch = F.roi_read(grid, cells, size, size)
        inputs = self.build_input_features(conv_patch, class_scores)
        z, _, candidate = self.gru_gates(old_patch, inputs)
        # the gru_write blend, applied per cell to the scattered gate and candidate;
        # on a cell-aligned box spanning patch - 1 cells this equals roi_write(grid, cells, gru_write(old_patch, inputs))
        gate = F.roi_write(Tensor(np.zeros(grid.shape, dtype=grid.dtype)), cells, z)
        target = F.roi_write(grid, cells, candidate)
        updated = gru_blend(grid, gate, target)
        return MemoryState(grid=updated, iteration=state.iteration + 1)

    def memory_update(self, state: MemoryState, detection: Detection, feature_map: Tensor, class_scores: Tensor) -> MemoryState:
        return self.write_box(state, detection.box.as_array(), feature_map, class_scores)
