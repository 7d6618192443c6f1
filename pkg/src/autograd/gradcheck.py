import logging
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from autograd.tensor import Tensor, no_grad, precision
from util.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_relative_error: float
    max_absolute_error: float = 0.0
    per_input: List[float] = field(default_factory=list)
    worst: Tuple[int, Tuple[int, ...]] = (-1, ())

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def _scalar(value: Tensor, where: str) -> float:
    if value.size != 1:
        raise ShapeError("grad_check", "loss size", 1, value.size)
    result = float(value.data.reshape(-1)[0])
    if not np.isfinite(result):
        raise NumericalError(f"non-finite loss during {where}", op="grad_check")
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    """|a - n| / max(floor, |a| + |n|), elementwise."""
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))


def grad_check_report(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], epsilon: float = 1e-3, floor: float = FLOOR
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of the scalar `fn(*inputs)` against central
    finite differences on every input element, in double precision.

    The relative error of an element is |a - n| / max(floor, |a| + |n|);
    gradients whose magnitudes sum to less than `floor` are compared absolutely.
    """
    with precision(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = fn(*leaves)
        _scalar(loss, "forward")
        loss.backward()
        analytic = [leaf.grad_or_zeros() for leaf in leaves]

        per_input: List[float] = []
        worst_error, worst_absolute, worst = 0.0, 0.0, (-1, ())
        with no_grad():
            for k, base in enumerate(arrays):
                numeric = np.zeros(base.shape)
                for idx in np.ndindex(base.shape):
                    losses = []
                    for sign in (1.0, -1.0):
                        shifted = [a.copy() for a in arrays]
                        shifted[k][idx] += sign * epsilon
                        losses.append(_scalar(fn(*[Tensor(a) for a in shifted]), "finite differences"))
                    numeric[idx] = (losses[0] - losses[1]) / (2.0 * epsilon)
                errors = relative_error(analytic[k], numeric, floor)
                if errors.size:
                    worst_absolute = max(worst_absolute, float(np.max(np.abs(analytic[k] - numeric))))
                input_error = float(errors.max()) if errors.size else 0.0
                per_input.append(input_error)
                if input_error > worst_error:
                    worst_error = input_error
                    worst = (k, tuple(int(i) for i in np.unravel_index(int(errors.argmax()), errors.shape)))

    logger.debug(
        "grad_check: max relative error %.3e (absolute %.3e) at input %d %s", worst_error, worst_absolute, worst[0], worst[1]
    )
    return GradCheckReport(max_relative_error=worst_error, max_absolute_error=worst_absolute, per_input=per_input, worst=worst)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], epsilon: float = 1e-3, floor: float = FLOOR) -> float:
    return grad_check_report(fn, inputs, epsilon, floor).max_relative_error
