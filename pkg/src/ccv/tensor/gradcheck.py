"""Finite-difference gradient checking.

Everything here only evaluates forward passes, so it can serve as an oracle
for the reverse-mode path. Use 64-bit tensors; 32-bit rounding swamps a 1e-4
step.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Graph, Tensor
from . import ops

STEP = 1e-4


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x.data``."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return grad


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in inputs:
        x.requires_grad = True
        x.zero_grad()
    with Graph() as g:
        loss = fn()
    g.backward(loss)
    return [x.grad.astype(np.float64) for x in inputs]


NORM_FLOOR = 1e-3


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||, NORM_FLOOR).

    The floor keeps gradients that cancel to (numerically) zero from turning
    1e-12 round-off into a relative error of 1.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), NORM_FLOOR)
    return float(np.linalg.norm(a - b) / denom)


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = STEP) -> list[float]:
    """Relative error between analytic and numerical gradients, per input."""
    analytic = analytic_grads(fn, inputs)
    return [relative_error(a, numerical_grad(fn, x, step)) for a, x in zip(analytic, inputs)]


def _rand(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), dtype=np.float64)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Scalar-valued probes for every differentiable primitive (64-bit)."""
    cases = {}
    a, b = _rand(rng, 2, 3, 3), _rand(rng, 2, 3, 3)
    w = _rand(rng, 2, 3, 3)
    cases["add"] = (lambda: ops.sum(ops.mul(ops.add(a, b), w)), [a, b])
    a2, b2 = _rand(rng, 4, 4), _rand(rng, 4, 4)
    w2 = _rand(rng, 4, 4)
    cases["sub"] = (lambda: ops.sum(ops.mul(ops.sub(a2, b2), w2)), [a2, b2])
    a3, b3 = _rand(rng, 3, 4), _rand(rng, 3, 4)
    cases["mul"] = (lambda: ops.sum(ops.mul(a3, b3)), [a3, b3])
    a4, b4 = _rand(rng, 3, 4), _rand(rng, 3, 4, low=0.5, high=2.0)
    cases["div"] = (lambda: ops.sum(ops.div(a4, b4)), [a4, b4])
    s, t = _rand(rng), _rand(rng, 2, 5)
    cases["scalar_broadcast"] = (lambda: ops.sum(ops.mul(ops.add(t, s), s)), [s, t])
    r = _rand(rng, 3, 5)
    r.data[np.abs(r.data) < 0.05] = 0.3  # keep away from the kink
    wr = _rand(rng, 3, 5)
    cases["relu"] = (lambda: ops.sum(ops.mul(ops.relu(r), wr)), [r])
    sg = _rand(rng, 4, 4, low=-3, high=3)
    ws = _rand(rng, 4, 4)
    cases["sigmoid"] = (lambda: ops.sum(ops.mul(ops.sigmoid(sg), ws)), [sg])
    sp = _rand(rng, 4, 4, low=-3, high=3)
    cases["softplus"] = (lambda: ops.sum(ops.mul(ops.softplus(sp), ws)), [sp])
    pe = _rand(rng, 3, 3, low=0.05, high=0.95)
    cases["binary_entropy"] = (lambda: ops.mean(ops.binary_entropy(pe)), [pe])
    m = _rand(rng, 3, 4, 2)
    wm = _rand(rng, 3, 2)
    cases["mean_axis"] = (lambda: ops.sum(ops.mul(ops.mean(m, axis=1, order_invariant=True), wm)), [m])
    sm = _rand(rng, 2, 3, 4)
    wsm = _rand(rng, 2, 4)
    cases["sum_axis"] = (lambda: ops.sum(ops.mul(ops.sum(sm, axis=1), wsm)), [sm])
    c1, c2 = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 3, 3, 3)
    wc = _rand(rng, 1, 5, 3, 3)
    cases["concat"] = (lambda: ops.sum(ops.mul(ops.concat([c1, c2], axis=1), wc)), [c1, c2])
    k1, k2 = _rand(rng, 2, 3), _rand(rng, 2, 3)
    wk = _rand(rng, 2, 2, 3)
    cases["stack"] = (lambda: ops.sum(ops.mul(ops.stack([k1, k2], axis=1), wk)), [k1, k2])
    e = _rand(rng, 2, 3)
    we = _rand(rng, 2, 4, 3)
    cases["expand"] = (lambda: ops.sum(ops.mul(ops.expand(e, 1, 4), we)), [e])
    rs = _rand(rng, 2, 6)
    wrs = _rand(rng, 3, 4)
    cases["reshape"] = (lambda: ops.sum(ops.mul(ops.reshape(rs, (3, 4)), wrs)), [rs])
    p = _rand(rng, 2, 4, 4)
    wp = _rand(rng, 2, 2, 2)
    cases["avg_pool2"] = (lambda: ops.sum(ops.mul(ops.avg_pool2(p), wp)), [p])
    u = _rand(rng, 2, 2, 3)
    wu = _rand(rng, 2, 4, 6)
    cases["upsample2"] = (lambda: ops.sum(ops.mul(ops.upsample2(u), wu)), [u])
    x = _rand(rng, 2, 5, 5)
    kern = _rand(rng, 3, 2, 3, 3)
    bias = _rand(rng, 3)
    wx = _rand(rng, 3, 5, 5)
    cases["conv2d"] = (lambda: ops.sum(ops.mul(ops.conv2d(x, kern, bias), wx)), [x, kern, bias])
    xb = _rand(rng, 2, 1, 4, 4)
    kb = _rand(rng, 2, 1, 3, 3)
    wxb = _rand(rng, 2, 2, 4, 4)
    cases["conv2d_batched"] = (lambda: ops.sum(ops.mul(ops.conv2d(xb, kb), wxb)), [xb, kb])
    xs = _rand(rng, 1, 2, 5, 5)
    ks = _rand(rng, 1, 2, 3, 3)
    bs = _rand(rng, 1)
    cases["mean_sigmoid_conv"] = (lambda: ops.mean(ops.sigmoid(ops.conv2d(xs, ks, bs))), [xs, ks, bs])
    return cases


_UNARY = ("sigmoid", "softplus", "neg", "square", "expand_mean", "pool_up")
_BINARY = ("add", "sub", "mul")


def random_graph(rng: np.random.Generator, depth: int = 6, size: int = 16):
    """A random composition of at most ``depth`` primitives over two leaves.

    Tensors have shape (1, 4, size // 4) with ``size`` <= 64 elements.
    Returns (fn, leaves).
    """
    shape = (1, 4, size // 4)
    leaves = [_rand(rng, *shape), _rand(rng, *shape)]
    weight = _rand(rng, *shape)
    plan = []
    for _ in range(int(rng.integers(1, depth + 1))):
        if rng.random() < 0.5:
            plan.append(("u", _UNARY[int(rng.integers(len(_UNARY)))], int(rng.integers(2))))
        else:
            plan.append(("b", _BINARY[int(rng.integers(len(_BINARY)))], int(rng.integers(2)), int(rng.integers(2))))

    def fn() -> Tensor:
        vals = list(leaves)
        for step in plan:
            if step[0] == "u":
                x = vals[step[2]]
                name = step[1]
                if name == "sigmoid":
                    y = ops.sigmoid(x)
                elif name == "softplus":
                    y = ops.softplus(x)
                elif name == "neg":
                    y = ops.neg(x)
                elif name == "square":
                    y = ops.mul(x, x)
                elif name == "expand_mean":
                    y = ops.mean(ops.expand(x, 0, 3), axis=0, order_invariant=True)
                else:
                    y = ops.upsample2(ops.avg_pool2(ops.reshape(x, (1, 2, 2, -1))))
                    y = ops.reshape(y, shape)
                vals[step[2]] = y
            else:
                a, b = vals[step[2]], vals[step[3]]
                op = getattr(ops, step[1])
                vals[step[2]] = op(a, b)
        return ops.sum(ops.mul(ops.add(vals[0], vals[1]), weight))

    return fn, leaves
