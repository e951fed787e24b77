from .tensor import (
    EngineError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    reset_tape,
    set_default_dtype,
)
from .ops import ComplexGrid
from .optim import OptimState, optimizer_step
from .gradcheck import grad_check
from .flops import count_flops

__all__ = [
    "ComplexGrid",
    "EngineError",
    "OptimState",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "count_flops",
    "current_tape",
    "default_dtype",
    "get_default_dtype",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "optimizer_step",
    "reset_tape",
    "set_default_dtype",
]
