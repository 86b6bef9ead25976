from . import tensor as T
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import OptimizerState, adamw_step
from .schedule import LrSchedule, lr_at
from .tensor import NonFiniteError, Tensor, grad, no_grad, value_and_grad

__all__ = [
    "T",
    "Tensor",
    "NonFiniteError",
    "grad",
    "no_grad",
    "value_and_grad",
    "OptimizerState",
    "adamw_step",
    "LrSchedule",
    "lr_at",
    "check_gradients",
    "numerical_gradient",
    "relative_error",
]
