"""
Finite-difference checks of every differentiable op and of the composite
paths training relies on: input fusion into the GRU and the reverse-RoI
write, a three-write chain, and fused heads behind a stop-gradient.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from autograd import Tensor, grad_check, precision
from autograd import functional as F
from impl.context_model import ContextModel
from impl.detector import FasterRCNN
from impl.memory import SpatialMemory
from impl.params import ParameterStore
from interface.base_context_model import ContextConfig
from interface.base_detector import DetectorConfig
from interface.base_memory import MemoryConfig, MemoryState

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
EPSILON = 1e-3
# central differences at EPSILON carry ~1e-7 of truncation error; gradients
# whose magnitudes sum below FLOOR are compared absolutely
FLOOR = 0.1

Built = Tuple[Callable[..., Tensor], List[np.ndarray]]


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], Built]


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Scalar loss: a fixed random projection of the output."""
    weights = rng.normal(size=out.shape)
    return lambda y: F.sum_all(F.mul(y, Tensor(weights)))


def _projected(op: Callable[..., Tensor], inputs: List[np.ndarray], rng: np.random.Generator) -> Built:
    with precision(np.float64):
        sample = op(*[Tensor(x) for x in inputs])
    loss = _project(sample, rng)
    return (lambda *xs: loss(op(*xs))), inputs


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _separated(rng: np.random.Generator, shape) -> np.ndarray:
    """Distinct values at least 0.01 apart, so max pooling never switches under a 1e-3 nudge."""
    count = int(np.prod(shape))
    return (rng.permutation(count) * 0.01 - 0.005 * count).reshape(shape)


# -- single ops --------------------------------------------------------------


def _elementwise(rng):
    return _projected(lambda a, b: F.add(F.mul(a, b), F.affine(a, 0.5, -0.2)), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], rng)


def _activations(rng):
    return _projected(
        lambda x: F.add(F.add(F.relu(x), F.sigmoid(x)), F.add(F.tanh(x), F.softmax(x))), [_away_from_zero(rng, (3, 5))], rng
    )


def _conv(rng):
    return _projected(lambda x, w, b: F.conv2d(x, w, b), [rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)], rng)


def _strided_conv(rng):
    return _projected(lambda x, w, b: F.conv2d(x, w, b, stride=2), [rng.normal(size=(6, 6, 2)), rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)], rng)


def _fully_connected(rng):
    return _projected(F.fully_connected, [rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)], rng)


def _bilinear_resize(rng):
    return _projected(lambda x: F.bilinear_resize(x, 5, 4), [rng.normal(size=(3, 3, 2))], rng)


def _roi_read(rng):
    box = np.array([0.6, 1.1, 4.2, 3.7])
    return _projected(lambda x: F.roi_read(x, box, 3, 3), [rng.normal(size=(5, 6, 2))], rng)


def _roi_write(rng):
    box = np.array([0.6, 1.1, 4.2, 3.7])
    return _projected(lambda x, p: F.roi_write(x, box, p), [rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2))], rng)


def _roi_max_pool(rng):
    boxes = np.array([[0.0, 0.0, 4.0, 4.0], [1.0, 2.0, 5.0, 5.0]])
    return _projected(lambda x: F.roi_max_pool(x, boxes, 2), [_separated(rng, (6, 6, 2))], rng)


def _shape_ops(rng):
    def op(a, v):
        tiled = F.tile_spatial(v, 3, 3)
        joined = F.concat([a, tiled], axis=-1)
        return F.index(F.reshape(joined, (9, -1)), (np.array([0, 4, 8]),))

    return _projected(op, [rng.normal(size=(3, 3, 2)), rng.normal(size=3)], rng)


def _losses(rng):
    labels = rng.integers(0, 4, size=5)
    targets = (rng.uniform(size=6) > 0.5).astype(np.float64)
    regression = rng.normal(size=(4, 4))
    offsets = rng.choice([-1.0, 1.0], size=(4, 4)) * np.where(rng.uniform(size=(4, 4)) > 0.5, rng.uniform(0.1, 0.8, (4, 4)), rng.uniform(1.2, 2.0, (4, 4)))

    def fn(logits, objectness, deltas):
        return F.add_all(
            [
                F.softmax_cross_entropy(logits, labels),
                F.sigmoid_bce(objectness, targets),
                F.smooth_l1(deltas, regression, sigma=1.0),
            ]
        )

    return fn, [rng.normal(size=(5, 4)), rng.normal(size=6), regression + offsets]


# -- composite paths ---------------------------------------------------------

IMAGE_HW = (16, 16)
NUM_CLASSES = 2


def _positive_store(store: ParameterStore, prefix: str) -> None:
    """Keep every ReLU in its linear region for the checked inputs."""
    for _, tensor in store.tensors(prefix):
        tensor.data = np.abs(tensor.data)


def _memory(rng) -> Tuple[SpatialMemory, ParameterStore]:
    store = ParameterStore(np.float64)
    memory = SpatialMemory(MemoryConfig(prior_h=2, prior_w=2, depth=2, patch=3), 2, NUM_CLASSES + 1, IMAGE_HW, store, rng)
    for name in ("input1/w", "input2/w"):
        store[f"smn/memory/{name}"].data = np.abs(store[f"smn/memory/{name}"].data)
    return memory, store


def _scores(rng) -> np.ndarray:
    raw = rng.uniform(0.1, 1.0, size=NUM_CLASSES + 1)
    return raw / raw.sum()


def _input_features(rng):
    memory, store = _memory(rng)
    scores = Tensor(_scores(rng))

    def fn(patch, w1):
        with store.swapped({"smn/memory/input1/w": w1}):
            return memory.build_input_features(patch, scores)

    return _projected(fn, [rng.uniform(0.1, 1.0, size=(3, 3, 2)), store["smn/memory/input1/w"].data.copy()], rng)


def _gru_write(rng):
    memory, store = _memory(rng)

    def fn(old, inputs, wz):
        with store.swapped({"smn/memory/gru/wz": wz}):
            return memory.gru_write(old, inputs)

    return _projected(fn, [rng.uniform(-1.0, 1.0, size=(3, 3, 2)), rng.normal(size=(3, 3, 2)), store["smn/memory/gru/wz"].data.copy()], rng)


def _memory_write(rng):
    memory, store = _memory(rng)
    box = np.array([2.5, 3.0, 11.0, 12.5])
    scores = Tensor(_scores(rng))

    def fn(grid, fmap, wz, uh):
        with store.swapped({"smn/memory/gru/wz": wz, "smn/memory/gru/uh": uh}):
            return memory.write_box(MemoryState(grid, 0), box, fmap, scores).grid

    inputs = [rng.normal(size=(5, 5, 2)), rng.uniform(0.1, 1.0, size=(5, 5, 2)), store["smn/memory/gru/wz"].data.copy(), store["smn/memory/gru/uh"].data.copy()]
    return _projected(fn, inputs, rng)


def _write_chain(rng):
    memory, store = _memory(rng)
    boxes = [np.array([1.0, 1.0, 9.0, 8.0]), np.array([5.0, 4.0, 15.0, 14.0]), np.array([2.0, 6.0, 10.0, 15.0])]
    rows = [Tensor(_scores(rng)) for _ in boxes]

    def fn(grid, fmap, wr):
        with store.swapped({"smn/memory/gru/wr": wr}):
            state = MemoryState(grid, 0)
            for box, row in zip(boxes, rows):
                state = memory.write_box(state, box, fmap, row)
            return state.grid

    inputs = [rng.normal(size=(5, 5, 2)), rng.uniform(0.1, 1.0, size=(5, 5, 2)), store["smn/memory/gru/wr"].data.copy()]
    return _projected(fn, inputs, rng)


def _detector_config() -> DetectorConfig:
    return DetectorConfig(
        feature_stride=4, backbone_channels=2, anchor_scales=[4.0], anchor_ratios=[1.0],
        proposals_k=4, proposals_top=8, num_classes=NUM_CLASSES, pool_size=2, fc_dim=3,
    )


def _backbone(rng):
    store = ParameterStore(np.float64)
    detector = FasterRCNN(_detector_config(), (8, 8), store, rng)
    _positive_store(store, "base/conv")

    def fn(image, w1):
        with store.swapped({"base/conv1/w": w1}):
            return detector.backbone_forward(image)

    return _projected(fn, [rng.uniform(0.1, 1.0, size=(8, 8, 3)), store["base/conv1/w"].data.copy()], rng)


def _fused_rpn(rng):
    store = ParameterStore(np.float64)
    config = ContextConfig(mode="smn", design="d", depth=3, kernel=3, channels=2, residual_period=2, fc_dim=3)
    context = ContextModel(config, _detector_config(), 2, store, rng)
    _positive_store(store, "smn/context/layer")
    _positive_store(store, "smn/context/rpn/conv")
    base = rng.normal(size=16)
    targets = (rng.uniform(size=16) > 0.5).astype(np.float64)

    def fn(grid, w1):
        with store.swapped({"smn/context/layer1/w": w1}):
            objectness, _ = context.memory_rpn(context.context_forward(grid))
            fused = context.fuse(Tensor(base, requires_grad=True), objectness, 1).fused
            return F.sigmoid_bce(fused, targets)

    return fn, [rng.uniform(0.1, 1.0, size=(4, 4, 2)), store["smn/context/layer1/w"].data.copy()]


def _roi_heads(rng):
    store = ParameterStore(np.float64)
    detector = FasterRCNN(_detector_config(), IMAGE_HW, store, rng)
    rois = np.array([[0.0, 0.0, 12.0, 12.0], [4.0, 2.0, 16.0, 14.0]])
    labels = np.array([1, 0])

    def fn(fmap, fc6):
        with store.swapped({"base/fc6/w": fc6}):
            regions = detector.classify_rois(fmap, rois)
            return F.softmax_cross_entropy(regions.cls_logits, labels)

    _positive_store(store, "base/fc")
    features = _separated(rng, (4, 4, 2))
    return fn, [features - features.min() + 0.1, store["base/fc6/w"].data.copy()]


def _memory_classifier(rng):
    store = ParameterStore(np.float64)
    config = ContextConfig(mode="smn", design="d", depth=3, kernel=3, channels=2, residual_period=2, fc_dim=3)
    context = ContextModel(config, _detector_config(), 2, store, rng)
    _positive_store(store, "smn/context/fc")
    _positive_store(store, "smn/context/fuse")
    rois = np.array([[0.0, 0.0, 12.0, 12.0], [4.0, 2.0, 16.0, 14.0]])
    labels = np.array([1, 0])
    weights = Tensor(rng.normal(size=(2, 4 * NUM_CLASSES)))

    def fn(m_conv, base_features, fuse1, fuse2):
        with store.swapped({"smn/context/fuse1/w": fuse1, "smn/context/fuse2/w": fuse2}):
            logits, deltas = context.memory_classifier(m_conv, rois, base_features)
            return F.add(F.softmax_cross_entropy(logits, labels), F.sum_all(F.mul(deltas, weights)))

    m_conv = _separated(rng, (4, 4, 2))
    return fn, [
        m_conv - m_conv.min() + 0.1,
        rng.uniform(0.1, 1.0, size=(2, 3)),
        store["smn/context/fuse1/w"].data.copy(),
        store["smn/context/fuse2/w"].data.copy(),
    ]


CASES: List[GradCase] = [
    GradCase("elementwise", _elementwise),
    GradCase("activations", _activations),
    GradCase("conv2d", _conv),
    GradCase("conv2d_stride2", _strided_conv),
    GradCase("fully_connected", _fully_connected),
    GradCase("bilinear_resize", _bilinear_resize),
    GradCase("roi_read", _roi_read),
    GradCase("roi_write", _roi_write),
    GradCase("roi_max_pool", _roi_max_pool),
    GradCase("tile_concat_index", _shape_ops),
    GradCase("losses", _losses),
    GradCase("backbone_forward", _backbone),
    GradCase("build_input_features", _input_features),
    GradCase("gru_write", _gru_write),
    GradCase("memory_write", _memory_write),
    GradCase("write_chain_3", _write_chain),
    GradCase("fused_rpn_stop_gradient", _fused_rpn),
    GradCase("roi_pool_heads", _roi_heads),
    GradCase("memory_classifier", _memory_classifier),
]


def run_case(case: GradCase, seed: int, epsilon: float = EPSILON, floor: float = FLOOR) -> float:
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        fn, inputs = case.build(rng)
    return grad_check(fn, inputs, epsilon, floor)


def run_suite(seeds: Iterable[int] = range(20), names: Optional[Sequence[str]] = None, epsilon: float = EPSILON) -> Dict[str, float]:
    """Worst relative error of each case over `seeds`."""
    selected = [case for case in CASES if names is None or case.name in names]
    unknown = set(names or ()) - {case.name for case in CASES}
    if unknown:
        raise ValueError(f"Unknown gradient check(s): {sorted(unknown)}")
    seeds = list(seeds)
    worst: Dict[str, float] = {}
    for case in selected:
        worst[case.name] = max(run_case(case, seed, epsilon) for seed in seeds)
        logger.info("%-24s max relative error %.2e", case.name, worst[case.name])
    return worst
