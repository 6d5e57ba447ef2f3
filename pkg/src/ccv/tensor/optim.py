from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Tensor


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adam_step: params, grads and moment buffers differ in length")
    if state.step < 0:
        raise ValueError("adam_step: negative step counter")
    t = state.step + 1
    bc1 = 1 - beta1 ** t
    bc2 = 1 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape or state.v[i].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {i}: "
                             f"param {p.shape}, grad {g.shape}, moment {state.m[i].shape}")
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        update = (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
        p.data -= update
    state.step = t


class Adam:
    """Adam over a fixed list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps)
