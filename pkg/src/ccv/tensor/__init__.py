"""Minimal dense tensors with reverse-mode automatic differentiation."""

from .core import DEFAULT_DTYPE, Graph, Node, Tensor, backward, current_graph
from .ops import (
    add,
    avg_pool2,
    binary_entropy,
    concat,
    conv2d,
    detach,
    div,
    expand,
    mean,
    mean_reduce,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softplus,
    stack,
    sub,
    sum,
    upsample2,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "DEFAULT_DTYPE", "Graph", "Node", "Tensor", "backward", "current_graph",
    "add", "avg_pool2", "binary_entropy", "concat", "conv2d", "detach", "div", "expand",
    "mean", "mean_reduce", "mul", "neg", "relu", "reshape", "sigmoid", "softplus", "stack",
    "sub", "sum", "upsample2", "Adam", "AdamState", "adam_step",
]
