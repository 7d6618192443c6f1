"""
Differentiable operators for the detector, the spatial memory and the context
network. Layouts are channels-last: feature maps are H x W x C and convolution
weights are kh x kw x Cin x Cout.
"""

from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from autograd.tensor import Function, Tensor
from util.errors import DegenerateBoxError, ShapeError

BoxLike = Union[Sequence[float], np.ndarray]


def _as_tensor(value: Union[Tensor, float, np.ndarray]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "shape", a.shape, b.shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (no broadcasting beyond scalars)
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _require_same_shape("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        _require_same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Affine(Function):
    def forward(self, x, scale: float = 1.0, shift: float = 0.0):
        self.scale = scale
        return x * scale + shift

    def backward(self, grad):
        return (grad * self.scale,)


class StopGradient(Function):
    def forward(self, x):
        return x

    def backward(self, grad):
        return (None,)


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if isinstance(b, Tensor):
        return Add.apply(a, b)
    return Affine.apply(a, scale=1.0, shift=float(b))


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if isinstance(b, Tensor):
        return Mul.apply(a, b)
    return Affine.apply(a, scale=float(b), shift=0.0)


def scale(x: Tensor, factor: float) -> Tensor:
    return Affine.apply(x, scale=float(factor), shift=0.0)


def affine(x: Tensor, factor: float, shift: float) -> Tensor:
    return Affine.apply(x, scale=float(factor), shift=float(shift))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; nothing behind this marker receives gradient."""
    out = StopGradient.apply(x)
    out.requires_grad = False
    return out


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        # tanh form never overflows
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Softmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        ex = np.exp(shifted)
        self.out = ex / ex.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=-1, keepdims=True)
        return (self.out * (grad - inner),)


_ACTIVATIONS = {"relu": Relu, "sigmoid": Sigmoid, "tanh": Tanh, "softmax": Softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        op = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"Unknown activation '{kind}'; expected one of {sorted(_ACTIVATIONS)}")
    return op.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def softmax(x: Tensor) -> Tensor:
    return Softmax.apply(x)


# ---------------------------------------------------------------------------
# Convolution and affine layers
# ---------------------------------------------------------------------------


class Conv2d(Function):
    def forward(self, x, weight, bias, stride: int = 1, pad: int = 0):
        if x.ndim != 3:
            raise ShapeError("conv2d", "input rank", 3, x.ndim)
        if weight.ndim != 4:
            raise ShapeError("conv2d", "weight rank", 4, weight.ndim)
        kh, kw, cin, cout = weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d", "kernel extent", "odd", (kh, kw))
        if x.shape[2] != cin:
            raise ShapeError("conv2d", "Cin", cin, x.shape[2])
        if bias.shape != (cout,):
            raise ShapeError("conv2d", "Cout", (cout,), bias.shape)
        height, width = x.shape[0] + 2 * pad, x.shape[1] + 2 * pad
        out_h = (height - kh) // stride + 1
        out_w = (width - kw) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError("conv2d", "output extent", ">= 1", (out_h, out_w))

        padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
        windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))
        windows = windows[: (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
        # windows: out_h x out_w x cin x kh x kw
        self.windows = windows
        self.weight = weight
        self.stride, self.pad = stride, pad
        self.input_shape, self.padded_shape = x.shape, padded.shape
        out = np.tensordot(windows, weight, axes=([2, 3, 4], [2, 0, 1]))
        return out + bias

    def backward(self, grad):
        kh, kw, cin, cout = self.weight.shape
        out_h, out_w = grad.shape[:2]
        s = self.stride

        grad_weight = np.tensordot(self.windows, grad, axes=([0, 1], [0, 1]))  # cin x kh x kw x cout
        grad_weight = grad_weight.transpose(1, 2, 0, 3)
        grad_bias = grad.sum(axis=(0, 1))

        columns = np.tensordot(grad, self.weight, axes=([2], [3]))  # out_h x out_w x kh x kw x cin
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[i : i + (out_h - 1) * s + 1 : s, j : j + (out_w - 1) * s + 1 : s] += columns[:, :, i, j]
        p = self.pad
        grad_input = grad_padded[p : p + self.input_shape[0], p : p + self.input_shape[1]] if p else grad_padded
        return grad_input, grad_weight, grad_bias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Cross-correlation; `pad` defaults to same-padding for odd kernels."""
    if pad is None:
        pad = weight.shape[0] // 2
    return Conv2d.apply(x, weight, bias, stride=int(stride), pad=int(pad))


class FullyConnected(Function):
    def forward(self, x, weight, bias):
        if weight.ndim != 2:
            raise ShapeError("fully_connected", "weight rank", 2, weight.ndim)
        if x.shape[-1] != weight.shape[0]:
            raise ShapeError("fully_connected", "Din", weight.shape[0], x.shape[-1])
        if bias.shape != (weight.shape[1],):
            raise ShapeError("fully_connected", "Dout", (weight.shape[1],), bias.shape)
        self.x, self.weight = x, weight
        return x @ weight + bias

    def backward(self, grad):
        if self.x.ndim == 1:
            grad_weight = np.outer(self.x, grad)
            grad_bias = grad
        else:
            grad_weight = self.x.T @ grad
            grad_bias = grad.sum(axis=0)
        return grad @ self.weight.T, grad_weight, grad_bias


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a D_in vector, or of each row of an R x D_in matrix."""
    return FullyConnected.apply(x, weight, bias)


# ---------------------------------------------------------------------------
# Bilinear sampling: resize, RoI read, reverse RoI write
# ---------------------------------------------------------------------------


def interpolation_matrix(start: float, end: float, n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """
    Align-corners linear interpolation weights (n_out x n_in) for samples
    spread evenly over [start, end] in cell coordinates.
    """
    if n_out == 1:
        positions = np.array([(start + end) / 2.0])
    else:
        positions = start + (end - start) * np.arange(n_out) / (n_out - 1)
    lower = np.clip(np.floor(positions).astype(np.int64), 0, n_in - 1)
    upper = np.minimum(lower + 1, n_in - 1)
    frac = positions - lower
    rows = np.arange(n_out)
    matrix = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(matrix, (rows, lower), 1.0 - frac)
    np.add.at(matrix, (rows, upper), frac)
    return matrix


def _map_box(op: str, box: BoxLike, height: int, width: int) -> Tuple[float, float, float, float]:
    x1, y1, x2, y2 = (float(v) for v in box)
    x1, x2 = np.clip([x1, x2], 0.0, width - 1)
    y1, y2 = np.clip([y1, y2], 0.0, height - 1)
    # a one-cell-wide map has no extent to sample over; any box is the cell
    if (x2 <= x1 and width > 1) or (y2 <= y1 and height > 1):
        raise DegenerateBoxError(op, tuple(box))
    return float(x1), float(y1), float(x2), float(y2)


def _sample_matrices(op: str, box: BoxLike, height: int, width: int, out_h: int, out_w: int, dtype):
    if out_h < 1 or out_w < 1:
        raise ShapeError(op, "output extent", ">= 1", (out_h, out_w))
    x1, y1, x2, y2 = _map_box(op, box, height, width)
    return (
        interpolation_matrix(y1, y2, out_h, height, dtype),
        interpolation_matrix(x1, x2, out_w, width, dtype),
    )


class Resample(Function):
    """Separable bilinear sampling `Ry @ map @ Rx^T`, applied per channel."""

    def forward(self, fmap, rows: np.ndarray, cols: np.ndarray):
        self.rows, self.cols = rows, cols
        out = np.tensordot(rows, fmap, axes=([1], [0]))  # out_h x W x C
        out = np.tensordot(out, cols, axes=([1], [1]))  # out_h x C x out_w
        return out.transpose(0, 2, 1)

    def backward(self, grad):
        back = np.tensordot(self.rows, grad, axes=([0], [0]))  # H x out_w x C
        back = np.tensordot(back, self.cols, axes=([1], [0]))  # H x C x W
        return (back.transpose(0, 2, 1),)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError("bilinear_resize", "input rank", 3, x.data.ndim)
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize", "output extent", ">= 1", (out_h, out_w))
    height, width = x.shape[:2]
    rows = interpolation_matrix(0.0, height - 1, out_h, height, x.dtype)
    cols = interpolation_matrix(0.0, width - 1, out_w, width, x.dtype)
    return Resample.apply(x, rows=rows, cols=cols)


def roi_read(fmap: Tensor, box: BoxLike, out_h: int, out_w: int) -> Tensor:
    """
    Bilinear crop-and-resize of `box` (map coordinates, x1 y1 x2 y2) to
    out_h x out_w. Differentiable with respect to the map only.
    """
    if fmap.data.ndim != 3:
        raise ShapeError("roi_read", "input rank", 3, fmap.data.ndim)
    height, width = fmap.shape[:2]
    rows, cols = _sample_matrices("roi_read", box, height, width, out_h, out_w, fmap.dtype)
    return Resample.apply(fmap, rows=rows, cols=cols)


def roi_coverage(box: BoxLike, height: int, width: int, patch_h: int, patch_w: int, dtype=np.float64):
    """Sampling matrices of `box` plus the accumulated bilinear weight of every cell."""
    rows, cols = _sample_matrices("roi_write", box, height, width, patch_h, patch_w, dtype)
    weight = np.outer(rows.sum(axis=0), cols.sum(axis=0))
    return rows, cols, weight


class RoIWrite(Function):
    def forward(self, fmap, patch, box=None):
        if patch.ndim != 3:
            raise ShapeError("roi_write", "patch rank", 3, patch.ndim)
        if patch.shape[2] != fmap.shape[2]:
            raise ShapeError("roi_write", "C", fmap.shape[2], patch.shape[2])
        height, width = fmap.shape[:2]
        rows, cols, weight = roi_coverage(box, height, width, patch.shape[0], patch.shape[1], fmap.dtype)
        self.rows, self.cols = rows, cols
        self.mask = weight > 0
        self.inv_weight = np.where(self.mask, 1.0 / np.where(self.mask, weight, 1.0), 0.0)
        scattered = np.tensordot(rows.T, patch, axes=([1], [0]))  # H x pW x C
        scattered = np.tensordot(scattered, cols.T, axes=([1], [1])).transpose(0, 2, 1)  # H x W x C
        normalized = scattered * self.inv_weight[:, :, None]
        return np.where(self.mask[:, :, None], normalized, fmap)

    def backward(self, grad):
        grad_map = np.where(self.mask[:, :, None], 0.0, grad).astype(grad.dtype)
        weighted = grad * self.inv_weight[:, :, None]
        grad_patch = np.tensordot(self.rows, weighted, axes=([1], [0]))
        grad_patch = np.tensordot(grad_patch, self.cols, axes=([1], [1])).transpose(0, 2, 1)
        return grad_map, grad_patch


def roi_write(fmap: Tensor, box: BoxLike, patch: Tensor) -> Tensor:
    """
    Reverse RoI operation: scatter `patch` into the box with the bilinear
    weights `roi_read` samples with, normalising the accumulated weight per
    destination cell. Cells the box never touches keep their values.
    """
    if fmap.data.ndim != 3:
        raise ShapeError("roi_write", "input rank", 3, fmap.data.ndim)
    return RoIWrite.apply(fmap, patch, box=tuple(float(v) for v in box))


def _pool_bins(boxes: np.ndarray, pool: int, height: int, width: int):
    """Integer bin edges (start inclusive, end exclusive) of quantized RoIs."""
    quant = np.rint(boxes).astype(np.int64)
    x1 = np.clip(quant[:, 0], 0, width - 1)
    y1 = np.clip(quant[:, 1], 0, height - 1)
    x2 = np.clip(np.maximum(quant[:, 2], x1), 0, width - 1)
    y2 = np.clip(np.maximum(quant[:, 3], y1), 0, height - 1)
    bins = np.arange(pool)

    def edges(lo, hi):
        extent = (hi - lo + 1)[:, None]
        start = lo[:, None] + (bins[None, :] * extent) // pool
        end = lo[:, None] - ((-(bins[None, :] + 1) * extent) // pool)
        return start, end

    ys, ye = edges(y1, y2)
    xs, xe = edges(x1, x2)
    return ys, ye, xs, xe


class RoIMaxPool(Function):
    chunk = 32

    def forward(self, fmap, boxes: np.ndarray = None, pool: int = 7):
        height, width, channels = fmap.shape
        count = boxes.shape[0]
        ys, ye, xs, xe = _pool_bins(boxes, pool, height, width)
        rows, cols = np.arange(height), np.arange(width)
        row_mask = (rows[None, None, :] >= ys[:, :, None]) & (rows[None, None, :] < ye[:, :, None])
        col_mask = (cols[None, None, :] >= xs[:, :, None]) & (cols[None, None, :] < xe[:, :, None])

        out = np.empty((count, pool, pool, channels), dtype=fmap.dtype)
        argmax = np.empty((count, pool, pool, channels), dtype=np.int64)
        for lo in range(0, count, self.chunk):
            hi = min(lo + self.chunk, count)
            # max over columns of each column bin: r x pb x H x C
            masked = np.where(col_mask[lo:hi, :, None, :, None], fmap[None, None], -np.inf)
            best_col = masked.argmax(axis=3)
            col_max = np.take_along_axis(masked, best_col[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            # then over rows of each row bin: r x pa x pb x H x C
            masked = np.where(row_mask[lo:hi, :, None, :, None], col_max[:, None], -np.inf)
            best_row = masked.argmax(axis=3)
            out[lo:hi] = np.take_along_axis(masked, best_row[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            spread = np.broadcast_to(best_col[:, None], masked.shape)
            chosen_col = np.take_along_axis(spread, best_row[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            argmax[lo:hi] = best_row * width + chosen_col
        self.argmax = argmax
        self.map_shape = fmap.shape
        return out

    def backward(self, grad):
        height, width, channels = self.map_shape
        flat = np.zeros((height * width, channels), dtype=grad.dtype)
        channel_index = np.broadcast_to(np.arange(channels), grad.shape)
        np.add.at(flat, (self.argmax, channel_index), grad)
        return (flat.reshape(self.map_shape),)


def roi_max_pool(fmap: Tensor, boxes: np.ndarray, pool: int = 7) -> Tensor:
    """Fast R-CNN max pooling of R map-coordinate boxes to R x pool x pool x C."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        raise ShapeError("roi_max_pool", "R", ">= 1", 0)
    if np.any(boxes[:, 2] < boxes[:, 0]) or np.any(boxes[:, 3] < boxes[:, 1]):
        raise DegenerateBoxError("roi_max_pool", boxes[(boxes[:, 2] < boxes[:, 0]) | (boxes[:, 3] < boxes[:, 1])][0])
    return RoIMaxPool.apply(fmap, boxes=boxes, pool=int(pool))


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


class Concat(Function):
    def forward(self, *arrays, axis: int = -1):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Reshape(Function):
    def forward(self, x, shape: Tuple[int, ...] = ()):
        self.input_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.input_shape),)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class Index(Function):
    def forward(self, x, key: Any = None):
        self.key = key
        self.input_shape = x.shape
        return np.array(x[key])

    def backward(self, grad):
        full = np.zeros(self.input_shape, dtype=grad.dtype)
        np.add.at(full, self.key, grad)
        return (full,)


def index(x: Tensor, key: Any) -> Tensor:
    return Index.apply(x, key=key)


class TileSpatial(Function):
    def forward(self, vector, height: int = 1, width: int = 1):
        return np.broadcast_to(vector, (height, width, vector.shape[0])).copy()

    def backward(self, grad):
        return (grad.sum(axis=(0, 1)),)


def tile_spatial(vector: Tensor, height: int, width: int) -> Tensor:
    """Tile a K vector at every location of a height x width grid."""
    if vector.data.ndim != 1:
        raise ShapeError("tile_spatial", "input rank", 1, vector.data.ndim)
    return TileSpatial.apply(vector, height=int(height), width=int(width))


class SumAll(Function):
    def forward(self, x):
        self.input_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.full(self.input_shape, grad, dtype=grad.dtype),)


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(x)


def add_all(tensors: Sequence[Tensor]) -> Optional[Tensor]:
    total = None
    for t in tensors:
        total = t if total is None else add(total, t)
    return total


# ---------------------------------------------------------------------------
# Losses (scalar outputs)
# ---------------------------------------------------------------------------


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels: np.ndarray = None, weights: np.ndarray = None, normalizer: float = 1.0):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        rows = np.arange(logits.shape[0])
        self.probs = np.exp(log_probs)
        self.labels, self.weights, self.normalizer = labels, weights, normalizer
        return np.asarray(-(weights * log_probs[rows, labels]).sum() / normalizer)

    def backward(self, grad):
        delta = self.probs.copy()
        delta[np.arange(delta.shape[0]), self.labels] -= 1.0
        return (grad * delta * (self.weights / self.normalizer)[:, None],)


class SigmoidBinaryCrossEntropy(Function):
    def forward(self, logits, targets: np.ndarray = None, weights: np.ndarray = None, normalizer: float = 1.0):
        self.logits, self.targets, self.weights, self.normalizer = logits, targets, weights, normalizer
        softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
        return np.asarray((weights * (softplus - targets * logits)).sum() / normalizer)

    def backward(self, grad):
        prob = 0.5 * (1.0 + np.tanh(0.5 * self.logits))
        return (grad * (prob - self.targets) * self.weights / self.normalizer,)


class SmoothL1(Function):
    def forward(self, pred, target: np.ndarray = None, weights: np.ndarray = None, normalizer: float = 1.0, sigma: float = 1.0):
        diff = pred - target
        sigma2 = sigma * sigma
        small = np.abs(diff) < 1.0 / sigma2
        self.small, self.diff, self.sigma2 = small, diff, sigma2
        self.weights, self.normalizer = weights, normalizer
        per_coord = np.where(small, 0.5 * sigma2 * diff * diff, np.abs(diff) - 0.5 / sigma2)
        return np.asarray((weights[:, None] * per_coord).sum() / normalizer)

    def backward(self, grad):
        slope = np.where(self.small, self.sigma2 * self.diff, np.sign(self.diff))
        return (grad * slope * (self.weights / self.normalizer)[:, None],)


def _loss_weights(weights: Optional[np.ndarray], count: int, dtype) -> np.ndarray:
    if weights is None:
        return np.ones(count, dtype=dtype)
    return np.asarray(weights, dtype=dtype)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weights: Optional[np.ndarray] = None, normalizer: Optional[float] = None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("softmax_cross_entropy", "R", labels.shape[0], logits.shape)
    w = _loss_weights(weights, labels.shape[0], logits.dtype)
    norm = float(normalizer) if normalizer else max(float(w.sum()), 1.0)
    return SoftmaxCrossEntropy.apply(logits, labels=labels, weights=w, normalizer=norm)


def sigmoid_bce(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None, normalizer: Optional[float] = None) -> Tensor:
    targets = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise ShapeError("sigmoid_bce", "n", targets.shape, logits.shape)
    w = _loss_weights(weights, targets.shape[0], logits.dtype)
    norm = float(normalizer) if normalizer else max(float(w.sum()), 1.0)
    return SigmoidBinaryCrossEntropy.apply(logits, targets=targets, weights=w, normalizer=norm)


def smooth_l1(pred: Tensor, target: np.ndarray, weights: Optional[np.ndarray] = None, normalizer: Optional[float] = None, sigma: float = 1.0) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError("smooth_l1", "shape", target.shape, pred.shape)
    w = _loss_weights(weights, target.shape[0], pred.dtype)
    norm = float(normalizer) if normalizer else max(float(w.sum()), 1.0)
    return SmoothL1.apply(pred, target=target, weights=w, normalizer=norm, sigma=float(sigma))
