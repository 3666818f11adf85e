"""Minimal reverse-mode differentiable tensor core."""

from .gradcheck import analytic_gradient, finite_difference, grad_check, relative_error
from .ops import *  # noqa: F401,F403
from .ops import DomainError, ShapeError
from .tensor import (
    Record,
    Tape,
    Tensor,
    as_tensor,
    backward,
    constant,
    get_dtype,
    precision,
    record,
    set_precision,
)
