"""Cycle context verification with a query-specific additive prompt.

The frozen model segments the prompted query; the query and its soft
prediction then serve as the only context pair for re-segmenting each
original context image. The mean soft Dice of those secondary predictions
is the verification accuracy, and the prompt is optimised to raise it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .metrics import entropy_objective, soft_dice_per_item
from .net.model import ContextSet, ModelWeights, as_tensor, forward, forward_shared_context
from .tensor import Adam, Graph, Tensor, ops

OBJECTIVES = ("cycle", "entropy")
PROMPT_MODES = ("image", "border")
SELECTIONS = ("last", "best")


class CcvDiverged(RuntimeError):
    pass


@dataclass
class CcvConfig:
    threshold: float = 0.9
    max_iters: int = 20
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    update_first: bool = True
    update_second: bool = True
    objective: str = "cycle"
    prompt_mode: str = "image"
    border_width: int = 4
    select_final: str = "last"

    def validate(self) -> "CcvConfig":
        if not 0 <= self.threshold <= 1:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.select_final not in SELECTIONS:
            raise ValueError(f"select_final must be one of {SELECTIONS}, got {self.select_final!r}")
        if self.objective == "cycle" and not (self.update_first or self.update_second):
            raise ValueError("cycle objective needs update_first or update_second")
        if self.prompt_mode == "border" and self.border_width < 1:
            raise ValueError(f"border_width must be >= 1, got {self.border_width}")
        return self


def border_band(height: int, width: int, band: int) -> np.ndarray:
    """1 on the outer ``band`` pixels of an ``height x width`` frame, 0 inside."""
    m = np.ones((height, width))
    if 2 * band < min(height, width):
        m[band:height - band, band:width - band] = 0
    return m


class Prompt:
    """Learnable additive perturbation of the query image, zero-initialised."""

    def __init__(self, shape, mode: str = "image", border_width: int = 4, dtype=np.float32):
        if mode not in PROMPT_MODES:
            raise ValueError(f"prompt mode must be one of {PROMPT_MODES}, got {mode!r}")
        self.values = Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)
        self.mode = mode
        self.border_width = border_width
        self.band = None
        if mode == "border":
            self.band = border_band(shape[-2], shape[-1], border_width).reshape((1,) * (len(shape) - 2)
                                                                                + shape[-2:]).astype(dtype)
            self.band = np.broadcast_to(self.band, shape).copy()

    @property
    def shape(self):
        return self.values.shape

    def project(self) -> None:
        """Zero everything outside the border band (border mode only)."""
        if self.band is not None:
            self.values.data *= self.band

    def copy(self) -> "Prompt":
        p = Prompt(self.shape, self.mode, self.border_width, self.values.dtype)
        p.values.data[...] = self.values.data
        return p


def apply_prompt(query, prompt: Prompt) -> Tensor:
    """x_hat = x + P (border mode: P restricted to the band). Not clipped."""
    q = query if isinstance(query, Tensor) else Tensor(np.asarray(query), dtype=prompt.values.dtype)
    if q.shape != prompt.shape:
        raise ValueError(f"apply_prompt: query {q.shape} vs prompt {prompt.shape}")
    values = prompt.values
    if prompt.band is not None:
        values = ops.mul(values, Tensor(prompt.band, dtype=values.dtype))
    return ops.add(q, values)


def predict_query(weights: ModelWeights, query_hat, context: ContextSet) -> Tensor:
    return forward(weights, query_hat, context)


def cycle_verify(weights: ModelWeights, query_hat, query_pred, context: ContextSet,
                 update_first: bool = True, update_second: bool = True) -> tuple[Tensor, Tensor]:
    """Swap roles: segment every context image using (query_hat, query_pred) as context.

    Returns the per-pair soft Dice ``[N]`` and their mean. ``update_first``
    keeps the gradient path through the query prediction; ``update_second``
    the path through the query image in the context slot.
    """
    if len(context) == 0:
        raise ValueError("cycle_verify: empty context set")
    dtype = weights.dtype
    img = as_tensor(query_hat, dtype)
    msk = as_tensor(query_pred, dtype)
    if not update_second:
        img = ops.detach(img)
    if not update_first:
        msk = ops.detach(msk)
    images = np.stack([np.asarray(p.image.data if isinstance(p.image, Tensor) else p.image) for p in context])
    masks = np.stack([np.asarray(p.mask.data if isinstance(p.mask, Tensor) else p.mask) for p in context])
    preds = forward_shared_context(weights, Tensor(images, dtype=dtype), img, msk)
    per_pair = soft_dice_per_item(preds, Tensor(masks, dtype=dtype))
    return per_pair, ops.mean(per_pair, order_invariant=True)


def ccv_loss(acc) -> Union[Tensor, float]:
    """L = 1 - A."""
    if isinstance(acc, Tensor):
        return ops.sub(1.0, acc)
    return 1.0 - acc


def entropy_loss(query_pred) -> Tensor:
    return entropy_objective(query_pred)


@dataclass
class TraceRow:
    iteration: int
    acc: float
    loss: float


@dataclass
class CycleOutcome:
    per_pair_acc: list
    aggregate: float
    loss: float
    iterations_run: int
    trace: list
    final_prediction: np.ndarray
    prompt: Optional[Prompt] = None
    extra: dict = field(default_factory=dict)


def _evaluate(weights, query, prompt, context, cfg):
    q_hat = apply_prompt(query, prompt)
    pred = predict_query(weights, q_hat, context)
    if cfg.objective == "cycle":
        _, acc = cycle_verify(weights, q_hat, pred, context, cfg.update_first, cfg.update_second)
        loss = ccv_loss(acc)
        return acc.item(), loss
    loss = entropy_loss(pred)
    return loss.item(), loss


def optimize_prompt(weights: ModelWeights, query, context: ContextSet,
                    cfg: CcvConfig = None) -> tuple[Prompt, list]:
    """Test-time optimisation of the prompt with the model frozen.

    Each iteration evaluates the current prompt, halts once the cycle
    accuracy exceeds ``cfg.threshold`` or ``cfg.max_iters`` steps were taken,
    and otherwise takes one Adam step on the prompt values.
    """
    cfg = (cfg or CcvConfig()).validate()
    dtype = weights.dtype
    q = as_tensor(query, dtype)
    prompt = Prompt(q.shape, cfg.prompt_mode, cfg.border_width, dtype)
    opt = Adam([prompt.values], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    trace = []
    best = None
    for it in range(cfg.max_iters + 1):
        opt.zero_grad()
        with Graph() as graph:
            value, loss = _evaluate(weights, q, prompt, context, cfg)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise CcvDiverged(f"diverged at iteration {it}: loss={loss_value}")
        trace.append(TraceRow(it, value, loss_value))
        if cfg.select_final == "best" and (best is None or loss_value < best[0]):
            best = (loss_value, prompt.copy())
        if cfg.objective == "cycle" and value > cfg.threshold:
            break
        if it == cfg.max_iters:
            break
        graph.backward(loss)
        opt.step()
        prompt.project()
    if cfg.select_final == "best":
        prompt = best[1]
    return prompt, trace


def run_ccv(weights: ModelWeights, query, context: ContextSet, cfg: CcvConfig = None) -> CycleOutcome:
    """Optimise the prompt, then segment the prompted query with the original context."""
    cfg = (cfg or CcvConfig()).validate()
    prompt, trace = optimize_prompt(weights, query, context, cfg)
    q_hat = apply_prompt(as_tensor(query, weights.dtype), prompt)
    pred = predict_query(weights, q_hat, context)
    per_pair, acc = cycle_verify(weights, q_hat, pred, context)
    return CycleOutcome(
        per_pair_acc=[float(v) for v in per_pair.data],
        aggregate=acc.item(),
        loss=float(ccv_loss(acc).item()),
        iterations_run=len(trace) - 1,
        trace=trace,
        final_prediction=pred.data,
        prompt=prompt,
    )


def finetune_backbone_cycle(weights: ModelWeights, query, context: ContextSet,
                            lr: float = 1e-4, iters: int = 20) -> CycleOutcome:
    """Ablation: minimise the cycle loss by updating a private copy of every model weight."""
    if iters > 20:
        raise ValueError(f"iters must be <= 20, got {iters}")
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    local = weights.copy(requires_grad=True)
    opt = Adam(local.parameters(), lr=lr)
    q = as_tensor(query, local.dtype)
    trace = []
    for it in range(iters + 1):
        opt.zero_grad()
        with Graph() as graph:
            pred = predict_query(local, q, context)
            _, acc = cycle_verify(local, q, pred, context)
            loss = ccv_loss(acc)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise CcvDiverged(f"diverged at iteration {it}: loss={loss_value}")
        trace.append(TraceRow(it, acc.item(), loss_value))
        if it == iters:
            break
        graph.backward(loss)
        opt.step()
    for p in local.parameters():
        p.requires_grad = False
    pred = predict_query(local, q, context)
    per_pair, acc = cycle_verify(local, q, pred, context)
    return CycleOutcome(
        per_pair_acc=[float(v) for v in per_pair.data],
        aggregate=acc.item(),
        loss=float(ccv_loss(acc).item()),
        iterations_run=iters,
        trace=trace,
        final_prediction=pred.data,
    )


def write_trace_csv(trace, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "acc", "loss"])
        for row in trace:
            w.writerow([row.iteration, repr(row.acc), repr(row.loss)])
