import hashlib
import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autograd import Tensor
from util.errors import CheckpointError

logger = logging.getLogger(__name__)


class ParameterStore:
    """
    Named trainable tensors. Names are slash-separated with the owning
    component first ("base/conv1/w", "smn/gru/wz"), which is how checkpoints,
    checksums and optimizers select a subset.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype).type
        self._params: Dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"Unknown parameter '{name}'")

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"Parameter '{name}' already exists")
        tensor = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def gaussian(self, name: str, shape: Sequence[int], fan_in: int, rng: np.random.Generator, scale: float = 1.0) -> Tensor:
        """Fan-in scaled Gaussian init, std = scale * sqrt(2 / fan_in)."""
        std = scale * np.sqrt(2.0 / max(fan_in, 1))
        return self.add(name, rng.normal(0.0, std, size=tuple(shape)))

    def zeros(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.add(name, np.zeros(tuple(shape)))

    def names(self, prefix: str = "") -> List[str]:
        return [name for name in sorted(self._params) if name.startswith(prefix)]

    def tensors(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        return [(name, self._params[name]) for name in self.names(prefix)]

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: self._params[name].data.copy() for name in self.names(prefix)}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
        """Replace the values of every parameter under `prefix`; shapes must agree."""
        expected = set(self.names(prefix))
        given = {name for name in tensors if name.startswith(prefix)}
        if expected != given:
            missing = sorted(expected - given)
            extra = sorted(given - expected)
            raise CheckpointError(f"checkpoint parameters do not match the model (missing {missing[:4]}, unexpected {extra[:4]})")
        for name in sorted(expected):
            value = np.asarray(tensors[name])
            param = self._params[name]
            if value.shape != param.shape:
                raise CheckpointError(f"parameter '{name}' has shape {value.shape} in the checkpoint, model expects {param.shape}")
            param.data = value.astype(self.dtype).copy()
            param.zero_grad()

    def checksum(self, prefix: str = "") -> str:
        digest = hashlib.sha256()
        for name in self.names(prefix):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return digest.hexdigest()

    @contextmanager
    def swapped(self, replacements: Mapping[str, Tensor]) -> Iterator[None]:
        """Temporarily substitute other tensors for the named parameters."""
        previous = {name: self[name] for name in replacements}
        self._params.update(replacements)
        try:
            yield
        finally:
            self._params.update(previous)

    def zero_grad(self, prefix: str = "") -> None:
        for name in self.names(prefix):
            self._params[name].zero_grad()

    def count(self, prefix: str = "") -> int:
        return sum(self._params[name].size for name in self.names(prefix))


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params: Sequence[Tuple[str, Tensor]], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        for name, param in self.params:
            grad = param.grad_or_zeros()
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            velocity = self.momentum * self.velocity[name] + grad
            self.velocity[name] = velocity
            param.data = (param.data - lr * velocity).astype(param.data.dtype)

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.zero_grad()
