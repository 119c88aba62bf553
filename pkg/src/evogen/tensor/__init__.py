"""Minimal dense tensors with reverse-mode autodiff, optimizers, seeded streams and checkpoints."""
from .core import (
    Tensor, add, as_tensor, broadcast_to, clip, concat, divide, exp, expand_dims, gather, gelu,
    grad, layer_norm, log, log_softmax, matmul, mean, multiply, negative, no_grad, one_hot, power,
    relu, reshape, sigmoid, slice_, softmax, sqrt, square, stack, stop_gradient, subtract, sum_,
    swapaxes, tanh, transpose, unbroadcast, where,
)
from .optim import AdamState, adam_step, clip_by_global_norm, global_norm
from .random import SeedStream

__all__ = [
    "Tensor", "add", "as_tensor", "broadcast_to", "clip", "concat", "divide", "exp", "expand_dims",
    "gather", "gelu", "grad", "layer_norm", "log", "log_softmax", "matmul", "mean", "multiply",
    "negative", "no_grad", "one_hot", "power", "relu", "reshape", "sigmoid", "slice_", "softmax",
    "sqrt", "square", "stack", "stop_gradient", "subtract", "sum_", "swapaxes", "tanh",
    "transpose", "unbroadcast", "where", "AdamState", "adam_step", "clip_by_global_norm",
    "global_norm", "SeedStream",
]
