import logging
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from util.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64
# grad recording and precision overrides are per thread, so concurrent
# inference never switches either for a training thread
_STATE = threading.local()


def _resolve(dtype: Union[str, type]) -> type:
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported tensor dtype: {dtype}")
    return resolved.type


def get_default_dtype() -> type:
    return getattr(_STATE, "dtype", None) or _DEFAULT_DTYPE


@contextmanager
def precision(dtype: Union[str, type]) -> Iterator[None]:
    """Temporarily switch, for this thread, the dtype new tensors are created with."""
    previous = getattr(_STATE, "dtype", None)
    _STATE.dtype = _resolve(dtype)
    try:
        yield
    finally:
        _STATE.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording them."""
    previous = is_grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient (or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise NumericalError(f"non-finite values produced by {cls.__name__}", op=cls.__name__)

        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """
    Dense row-major array with an optional handle (`creator`) into the
    computation that produced it.
    """

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence[Any]],
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype: Optional[Union[str, type]] = None,
    ):
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            array = data
        else:
            array = np.asarray(data, dtype=get_default_dtype())
        self.data = array
        self.requires_grad = requires_grad
        self.creator = creator
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def tape_node(self) -> Optional[Function]:
        return self.creator

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self._grad

    def grad_or_zeros(self) -> np.ndarray:
        return self._grad if self._grad is not None else np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError("accumulate_grad", "shape", self.data.shape, grad.shape)
        self._grad = grad.copy() if self._grad is None else self._grad + grad

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", "size", 1, self.data.size)
            grad = np.ones_like(self.data)
        Tape(self).backward(np.asarray(grad, dtype=self.data.dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        from autograd import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        from autograd import functional as F

        return F.add(self, -other if not isinstance(other, Tensor) else F.scale(other, -1.0))

    def __rsub__(self, other: float) -> "Tensor":
        from autograd import functional as F

        return F.affine(self, -1.0, float(other))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from autograd import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from autograd import functional as F

        return F.scale(self, -1.0)

    def __getitem__(self, key: Any) -> "Tensor":
        from autograd import functional as F

        return F.index(self, key)

    def reshape(self, *shape: int) -> "Tensor":
        from autograd import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self) -> "Tensor":
        from autograd import functional as F

        return F.sum_all(self)


class Tape:
    """
    The recorded computation behind one output, in topological order.

    Traversal stops at tensors that do not require gradients, which is how a
    stop-gradient marker cuts everything behind it out of the backward pass.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._topological_order(output)

    @staticmethod
    def _topological_order(output: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray) -> None:
        if not self.output.requires_grad:
            return
        pending: Dict[int, np.ndarray] = {id(self.output): grad}
        for node in reversed(self.nodes):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node.creator is None:
                node.accumulate_grad(node_grad)
                continue
            parent_grads = node.creator.backward(node_grad)
            for parent, parent_grad in zip(node.creator.tensors, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
