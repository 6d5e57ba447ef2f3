from __future__ import annotations

from typing import Union

import numpy as np

from .tensor import Tensor, ops

DICE_EPS = 1e-6

ArrayLike = Union[np.ndarray, Tensor]


def _tensor(x: ArrayLike, like: Tensor = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def soft_dice_per_item(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """(2 sum(p t) + eps) / (sum p + sum t + eps) over all but the leading axis."""
    pred = _tensor(pred)
    target = _tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ValueError(f"soft_dice: shape mismatch {pred.shape} vs {target.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = ops.sum(ops.mul(pred, target), axis=axes)
    denom = ops.add(ops.add(ops.sum(pred, axis=axes), ops.sum(target, axis=axes)), DICE_EPS)
    return ops.div(ops.add(ops.mul(inter, 2.0), DICE_EPS), denom)


def soft_dice(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """Differentiable Dice of a probability map against a mask (scalar Tensor).

    Empty prediction against empty target scores 1 through the smoothing term.
    """
    pred = _tensor(pred)
    target = _tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ValueError(f"soft_dice: shape mismatch {pred.shape} vs {target.shape}")
    inter = ops.sum(ops.mul(pred, target))
    denom = ops.add(ops.add(ops.sum(pred), ops.sum(target)), DICE_EPS)
    return ops.div(ops.add(ops.mul(inter, 2.0), DICE_EPS), denom)


def hard_dice(pred: ArrayLike, target: ArrayLike, thresh: float = 0.5) -> float:
    """Dice after thresholding ``pred`` (strictly above ``thresh`` is foreground)."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ValueError(f"hard_dice: shape mismatch {p.shape} vs {t.shape}")
    pb = (p > thresh).astype(np.float64)
    tb = t.astype(np.float64)
    return float((2 * (pb * tb).sum() + DICE_EPS) / (pb.sum() + tb.sum() + DICE_EPS))


def entropy_objective(pred: ArrayLike) -> Tensor:
    """Mean binary entropy of a probability map."""
    return ops.mean(ops.binary_entropy(_tensor(pred)))
