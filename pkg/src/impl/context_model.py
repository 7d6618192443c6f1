import logging
from typing import List, Optional, Tuple

import numpy as np

from autograd import Tensor
from autograd import functional as F
from impl.detector import fc, init_fc, init_rpn_head, rpn_head
from impl.params import ParameterStore
from interface.base_context_model import BaseContextModel, ContextConfig, HeadScores, MemoryLogits
from interface.base_detector import DetectorConfig
from util.box_ops import to_map_coords

logger = logging.getLogger(__name__)


class ContextModel(BaseContextModel):
    """
    Residual ConvNet over the memory grid (or, in "mlp" mode, over the
    backbone features) plus output heads shaped like the detector's, whose
    logits are added to the detector's.
    """

    def __init__(
        self,
        config: ContextConfig,
        detector_config: DetectorConfig,
        input_channels: int,
        params: ParameterStore,
        rng: Optional[np.random.Generator] = None,
        init_scale: float = 1.0,
        prefix: Optional[str] = None,
    ):
        self.config = config
        self.detector_config = detector_config
        self.input_channels = input_channels
        self.num_classes = detector_config.num_classes
        self.params = params
        self.prefix = prefix or ("smn/context" if config.mode == "smn" else "mlp/context")
        if f"{self.prefix}/layer1/w" not in params:
            self._init_params(rng if rng is not None else np.random.default_rng(0), init_scale)

    # -- parameters ----------------------------------------------------------

    def _init_params(self, rng: np.random.Generator, scale: float) -> None:
        c, k, p = self.config.channels, self.config.kernel, self.prefix
        head = self.config.head_init_scale
        for layer in range(1, self.config.depth + 1):
            c_in = self.input_channels if layer == 1 else c
            self.params.gaussian(f"{p}/layer{layer}/w", (k, k, c_in, c), k * k * c_in, rng, scale)
            self.params.zeros(f"{p}/layer{layer}/b", (c,))
        anchors = self.detector_config.anchors_per_location
        pooled = self.detector_config.pool_size**2 * c
        fc_dim, base_dim = self.config.fc_dim, self.detector_config.fc_dim
        init_rpn_head(self.params, f"{p}/rpn", c, anchors, rng, scale)
        self._scale_outputs(f"{p}/rpn", head)
        init_fc(self.params, f"{p}/fc6", pooled, fc_dim, rng, scale)
        init_fc(self.params, f"{p}/fc7", fc_dim, fc_dim, rng, scale)
        # two extra fc layers over [base fc7, memory fc7]
        init_fc(self.params, f"{p}/fuse1", base_dim + fc_dim, fc_dim, rng, scale)
        init_fc(self.params, f"{p}/fuse2", fc_dim, fc_dim, rng, scale)
        init_fc(self.params, f"{p}/cls", fc_dim, self.num_classes + 1, rng, 0.1 * head * scale)
        init_fc(self.params, f"{p}/bbox", fc_dim, 4 * self.num_classes, rng, 0.1 * head * scale)
        if self.config.mode == "smn":
            init_rpn_head(self.params, f"{p}/recon/rpn", c, anchors, rng, scale)
            init_fc(self.params, f"{p}/recon/fc6", pooled, fc_dim, rng, scale)
            init_fc(self.params, f"{p}/recon/fc7", fc_dim, fc_dim, rng, scale)
            init_fc(self.params, f"{p}/recon/cls", fc_dim, self.num_classes + 1, rng, 0.1 * scale)
            init_fc(self.params, f"{p}/recon/bbox", fc_dim, 4 * self.num_classes, rng, 0.1 * scale)

    def _scale_outputs(self, prefix: str, factor: float) -> None:
        for name in (f"{prefix}/cls/w", f"{prefix}/reg/w"):
            self.params[name].data = self.params[name].data * factor

    # -- design switches -----------------------------------------------------

    @property
    def trains_base(self) -> bool:
        """Designs (a), (b) and (c) back-propagate into the detector."""
        return self.config.mode == "smn" and self.config.design in ("a", "b", "c")

    def uses_memory(self, iteration: int) -> bool:
        if self.config.mode == "mlp":
            return True
        return self.config.design != "d" or iteration >= 1

    def stops_base(self, iteration: int) -> bool:
        if self.config.mode == "mlp" or self.config.design == "d":
            return True
        return self.config.design == "c" and iteration >= 1

    # -- forward -------------------------------------------------------------

    def residual_blocks(self) -> List[List[int]]:
        """Layers after the first, grouped into identity-skip blocks of `residual_period`."""
        rest = list(range(2, self.config.depth + 1))
        period = self.config.residual_period
        return [rest[i : i + period] for i in range(0, len(rest), period)]

    def _conv(self, layer: int, x: Tensor) -> Tensor:
        return F.relu(F.conv2d(x, self.params[f"{self.prefix}/layer{layer}/w"], self.params[f"{self.prefix}/layer{layer}/b"]))

    def context_forward(self, grid: Tensor) -> Tensor:
        x = self._conv(1, grid)
        for block in self.residual_blocks():
            h = x
            for layer in block:
                h = self._conv(layer, h)
            x = F.add(x, h) if len(block) == self.config.residual_period else h
        return x

    def _region_features(self, prefix: str, m_conv: Tensor, rois: np.ndarray) -> Tensor:
        map_hw = m_conv.shape[:2]
        stride = self.detector_config.feature_stride
        cells = to_map_coords(rois, (map_hw[0] * stride, map_hw[1] * stride), map_hw)
        pooled = F.roi_max_pool(m_conv, cells, self.detector_config.pool_size)
        flat = F.reshape(pooled, (pooled.shape[0], -1))
        return F.relu(fc(self.params, f"{prefix}/fc7", F.relu(fc(self.params, f"{prefix}/fc6", flat))))

    def memory_rpn(self, m_conv: Tensor) -> Tuple[Tensor, Tensor]:
        return rpn_head(self.params, f"{self.prefix}/rpn", m_conv)

    def memory_classifier(self, m_conv: Tensor, rois: np.ndarray, base_features: Tensor) -> Tuple[Tensor, Tensor]:
        p = self.prefix
        memory_features = self._region_features(p, m_conv, rois)
        joint = F.concat([base_features, memory_features], axis=-1)
        hidden = F.relu(fc(self.params, f"{p}/fuse2", F.relu(fc(self.params, f"{p}/fuse1", joint))))
        return fc(self.params, f"{p}/cls", hidden), fc(self.params, f"{p}/bbox", hidden)

    def reconstruction_heads(self, m_conv: Tensor, rois: np.ndarray) -> MemoryLogits:
        p = f"{self.prefix}/recon"
        objectness, deltas = rpn_head(self.params, f"{p}/rpn", m_conv)
        features = self._region_features(p, m_conv, rois)
        return MemoryLogits(
            rpn_objectness=objectness,
            rpn_deltas=deltas,
            cls_logits=fc(self.params, f"{p}/cls", features),
            cls_deltas=fc(self.params, f"{p}/bbox", features),
        )

    def fuse(self, base: Tensor, memory: Optional[Tensor], iteration: int) -> HeadScores:
        if memory is None or not self.uses_memory(iteration):
            return HeadScores(base=base, memory=None, fused=base)
        if self.config.mode == "smn" and self.config.design == "a":
            return HeadScores(base=base, memory=memory, fused=memory)
        skip = F.stop_gradient(base) if self.stops_base(iteration) else base
        return HeadScores(base=base, memory=memory, fused=F.add(skip, memory))
