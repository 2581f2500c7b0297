"""Minimal float64 autodiff: tensors, differentiable ops, Adam, checkpoints."""

from drrg.numerics import functional
from drrg.numerics.checkpoint import load_tensors, save_tensors
from drrg.numerics.optim import Adam, OptimizerState, adam_step
from drrg.numerics.tensor import Tensor, as_tensor, concat, matmul, no_grad, stack

__all__ = [
    "Adam",
    "OptimizerState",
    "Tensor",
    "adam_step",
    "as_tensor",
    "concat",
    "functional",
    "load_tensors",
    "matmul",
    "no_grad",
    "save_tensors",
    "stack",
]
