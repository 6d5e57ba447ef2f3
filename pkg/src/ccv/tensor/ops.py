"""Differentiable primitives.

Layout is channels-first with optional leading batch axes, e.g. ``[C, H, W]``
or ``[B, C, H, W]``. Elementwise binary ops require equal shapes; the only
broadcast allowed is scalar-with-tensor.
"""

from __future__ import annotations

from numbers import Number
from typing import Optional, Sequence

import numpy as np

from .core import Tensor, record


def _as_operand(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Number):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast is supported)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    # t is a scalar broadcast against g
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    a = _as_operand(a, b) if not isinstance(a, Tensor) else a
    b = _as_operand(b, a)
    _check_binary("add", a, b)
    out = a.data + b.data

    def backward(g):
        return (_reduce_to(g, a) if a.requires_grad else None,
                _reduce_to(g, b) if b.requires_grad else None)

    return record("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a = _as_operand(a, b) if not isinstance(a, Tensor) else a
    b = _as_operand(b, a)
    _check_binary("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return (_reduce_to(g, a) if a.requires_grad else None,
                _reduce_to(-g, b) if b.requires_grad else None)

    return record("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    a = _as_operand(a, b) if not isinstance(a, Tensor) else a
    b = _as_operand(b, a)
    _check_binary("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (_reduce_to(g * b.data, a) if a.requires_grad else None,
                _reduce_to(g * a.data, b) if b.requires_grad else None)

    return record("mul", (a, b), out, backward)


def div(a, b) -> Tensor:
    a = _as_operand(a, b) if not isinstance(a, Tensor) else a
    b = _as_operand(b, a)
    _check_binary("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _reduce_to(g / b.data, a) if a.requires_grad else None
        gb = _reduce_to(-g * a.data / (b.data * b.data), b) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, backward)


def neg(x: Tensor) -> Tensor:
    return record("neg", (x,), -x.data, lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return record("relu", (x,), out, lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    d = x.data
    out = (np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))).astype(x.dtype, copy=False)

    def backward(g):
        e = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1 / (1 + e), e / (1 + e))
        return (g * s,)

    return record("softplus", (x,), out, backward)


def binary_entropy(p: Tensor) -> Tensor:
    """Elementwise -[p ln p + (1-p) ln(1-p)] for p in [0, 1] (0 ln 0 = 0)."""
    d = p.data
    out = -(_xlogx(d) + _xlogx(1 - d))

    def backward(g):
        tiny = np.finfo(d.dtype).tiny
        q = np.clip(d, tiny, 1 - np.finfo(d.dtype).eps)
        return (g * (np.log1p(-q) - np.log(q)),)

    return record("binary_entropy", (p,), out.astype(p.dtype, copy=False), backward)


def _xlogx(v: np.ndarray) -> np.ndarray:
    safe = np.where(v > 0, v, 1)
    return np.where(v > 0, v * np.log(safe), 0)


def _norm_axes(axis, ndim: int) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes), dtype=x.dtype)

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return record("sum", (x,), out, backward)


def mean(x: Tensor, axis=None, order_invariant: bool = False) -> Tensor:
    """Arithmetic mean over ``axis`` (all elements when None).

    With ``order_invariant`` the values are sorted along the reduced axis
    before summation, so permuting the input along that axis yields a
    bit-identical result. The sum is accumulated in a wider type, which keeps
    the mean of k identical items exactly equal to the item.
    """
    if x.size == 0:
        raise ValueError("mean: empty tensor")
    axes = _norm_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    data = x.data
    if order_invariant:
        if axes is None:
            total = np.sort(data.reshape(-1)).astype(_wide(data.dtype)).sum()
        elif len(axes) == 1:
            total = _sorted_sum(data.astype(_wide(data.dtype)), axes[0])
        else:
            raise ValueError("mean: order_invariant supports a single axis or all axes")
    else:
        total = data.sum() if axes is None else data.sum(axis=axes)
    out = np.asarray(total / count, dtype=x.dtype)

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return record("mean", (x,), out, backward)


def _wide(dtype) -> type:
    # k * x is exact with 29 (float64) or 11 (x87 long double) spare mantissa bits
    return np.float64 if dtype == np.float32 else np.longdouble


def _sorted_sum(data: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` after sorting, so the result ignores input order."""
    n = data.shape[axis]
    if n > 16:
        return np.sort(data, axis=axis).sum(axis=axis)
    # odd-even transposition network: vectorised min/max beats np.sort on short strided axes
    rows = [np.take(data, i, axis=axis) for i in range(n)]
    for rnd in range(n):
        for i in range(rnd % 2, n - 1, 2):
            lo = np.minimum(rows[i], rows[i + 1])
            rows[i + 1] = np.maximum(rows[i], rows[i + 1])
            rows[i] = lo
    total = rows[0].copy()
    for r in rows[1:]:
        total += r
    return total


def mean_reduce(x: Tensor) -> Tensor:
    return mean(x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: no tensors")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ValueError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for d in range(ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ValueError(f"concat: dimension {d} mismatch {tensors[0].shape[d]} vs {t.shape[d]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                grads.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                grads.append(None)
        return grads

    return record("concat", tuple(tensors), out, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack: no tensors")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"stack: shape mismatch {shape} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return [np.ascontiguousarray(np.take(g, i, axis=ax)) if t.requires_grad else None
                for i, t in enumerate(tensors)]

    return record("stack", tuple(tensors), out, backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` at ``axis`` by repetition."""
    ax = axis % (x.ndim + 1)
    out = np.ascontiguousarray(np.broadcast_to(np.expand_dims(x.data, ax),
                                               x.shape[:ax] + (n,) + x.shape[ax:]))
    return record("expand", (x,), out, lambda g: (g.sum(axis=ax),))


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    return Tensor(x.data, dtype=x.dtype)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial size {h}x{w} must be even")
    v = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    out = ((v[..., 0, :, 0] + v[..., 0, :, 1]) + (v[..., 1, :, 0] + v[..., 1, :, 1])) * x.dtype.type(0.25)

    def backward(g):
        q = g * x.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=-2), 2, axis=-1),)

    return record("avg_pool2", (x,), out, backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def backward(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return record("upsample2", (x,), out, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """Cross-correlation of ``[..., C_in, H, W]`` with ``[C_out, C_in, kH, kW]``.

    ``padding`` (an int or a (rows, cols) pair) defaults to (k - 1) // 2 per
    axis, which keeps the spatial size. Each
    leading (batch) item is multiplied by its own GEMM call, so an item's
    output does not depend on what else is in the batch.
    """
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be rank 4, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size {kh}x{kw} must be odd")
    if x.ndim < 3:
        raise ValueError(f"conv2d: input must be at least rank 3 [C, H, W], got shape {x.shape}")
    if x.shape[-3] != c_in:
        raise ValueError(f"conv2d: input channels {x.shape[-3]} != kernel in-channels {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias length {bias.shape} != out-channels {c_out}")
    if padding is None:
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif isinstance(padding, int):
        ph = pw = padding
    else:
        ph, pw = padding
    if ph < 0 or pw < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    if x.dtype != kernel.dtype:
        raise ValueError(f"conv2d: dtype mismatch {x.dtype} vs {kernel.dtype}")

    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    xb = x.data.reshape(-1, c_in, h, w)
    nb = xb.shape[0]
    ho = h + 2 * ph - kh + 1
    wo = w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    if ph or pw:
        xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = xb
    cols = np.empty((nb, c_in, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    cols = cols.reshape(nb, c_in * kh * kw, ho * wo)
    wmat = kernel.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(*lead, c_out, ho, wo)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(nb, c_out, ho * wo)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(nb, c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
            if ph or pw:
                gxp = gxp[:, :, ph:ph + h, pw:pw + w]
            gx = np.ascontiguousarray(gxp).reshape(x.shape)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return record("conv2d", inputs, out, backward)
