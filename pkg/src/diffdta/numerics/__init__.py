"""Dense-tensor kernel: autodiff tensors, nn ops, Adam, checkpoints."""

from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad
from .params import ParamStore, adam_step
from . import ops
from . import checkpoint

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "grad_enabled",
    "no_grad",
    "ParamStore",
    "adam_step",
    "ops",
    "checkpoint",
]
