from . import ops
from .checkpoint import CheckpointError
from .nn import Conv2d, Linear, Module, Parameter
from .ops import attention, conv2d, softmax
from .optim import Adam, AdamState, adam_step
from .tensor import GradTape, NonFiniteError, Tensor, grad, no_grad

__all__ = [
    "Adam", "AdamState", "CheckpointError", "Conv2d", "GradTape", "Linear", "Module",
    "NonFiniteError", "Parameter", "Tensor", "adam_step", "attention", "conv2d", "grad",
    "no_grad", "ops", "softmax",
]
