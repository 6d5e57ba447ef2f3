"""Tensor type and the recording graph (tape) used for reverse-mode autodiff.

Operations record onto the innermost active :class:`Graph` only when at least
one input requires a gradient, so plain inference outside a ``with Graph()``
block costs nothing beyond the numpy arithmetic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float array with optional gradient tracking.

    ``data`` is a C-contiguous numpy array; ``grad`` is allocated (zeroed) for
    tensors created with ``requires_grad=True`` and accumulates on backward.
    Tensors produced by recorded operations carry ``node`` = (graph, index).
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # float arrays keep their precision; everything else gets the default
            arr = data if isinstance(data, np.ndarray) else None
            dtype = arr.dtype if arr is not None and arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


class Graph:
    """Append-only record of executed operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is also a
    topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = True
        out.grad = None
        out.node = (self, len(self.nodes))
        self.nodes.append(Node(op, inputs, out, backward))
        return out

    def backward(self, loss: Tensor, release: bool = True) -> None:
        backward(loss, self, release=release)


def record(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    """Wrap ``out_data`` as the result of ``op``; record it if gradients can flow."""
    graph = current_graph()
    if graph is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data, dtype=out_data.dtype)
    return graph.record(op, inputs, out_data, backward)


def backward(loss: Tensor, graph: Graph, release: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None or loss.node[0] is not graph:
        raise ValueError("backward: loss was not produced by this graph")
    if graph.nodes[loss.node[1]].backward is None:
        raise ValueError("backward: graph was already released")

    pending = {loss.node[1]: np.ones_like(loss.data)}
    for idx in range(loss.node[1], -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = graph.nodes[idx]
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is not None and inp.node[0] is graph:
                j = inp.node[1]
                if j in pending:
                    pending[j] = pending[j] + gi
                else:
                    pending[j] = gi
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
    if release:
        for node in graph.nodes:
            node.backward = None
