from .tensor import Function, Tape, Tensor, get_default_dtype, is_grad_enabled, no_grad, precision
from .gradcheck import GradCheckReport, grad_check, grad_check_report

__all__ = [
    "Function",
    "Tape",
    "Tensor",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "precision",
    "GradCheckReport",
    "grad_check",
    "grad_check_report",
]
