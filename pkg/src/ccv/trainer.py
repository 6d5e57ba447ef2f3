"""Episodic training of the in-context backbone on synthetic tasks."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .metrics import hard_dice, soft_dice_per_item
from .net.model import Architecture, ContextPair, ModelWeights, forward, forward_logits
from .synthetic import make_rng, render_pair, sample_task
from .tensor import Adam, Graph, Tensor, ops

log = logging.getLogger(__name__)

_EPISODE_TAG = {"train": 11, "val": 12}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_episodes: int = 4
    context_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    side: int = 64
    levels: int = 3
    base_channels: int = 16
    val_every: int = 250
    val_episodes: int = 50
    workers: int = 1  # >1 renders episodes in threads

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.context_size < 1:
            raise ValueError(f"context_size must be >= 1, got {self.context_size}")
        if self.batch_episodes < 1:
            raise ValueError(f"batch_episodes must be >= 1, got {self.batch_episodes}")


def sample_episode(master_seed: int, step: int, context_size: int, side: int = 64,
                   split: str = "train") -> tuple[ContextPair, list[ContextPair]]:
    """One (query, support) episode drawn from a freshly sampled task."""
    if context_size < 1:
        raise ValueError(f"context_size must be >= 1, got {context_size}")
    rng = make_rng(master_seed, step, _EPISODE_TAG[split])
    spec = sample_task(master_seed, int(rng.integers(2 ** 62)))
    base = int(rng.integers(2 ** 40))
    support = [render_pair(spec, base + i, side) for i in range(context_size)]
    query = render_pair(spec, base + context_size, side)
    return query, support


def _batch_arrays(episodes):
    q = np.stack([e[0].image for e in episodes])
    t = np.stack([e[0].mask for e in episodes])
    ci = np.stack([np.stack([p.image for p in e[1]]) for e in episodes])
    cm = np.stack([np.stack([p.mask for p in e[1]]) for e in episodes])
    return q, t, ci, cm


def episode_loss(weights: ModelWeights, q, t, ci, cm) -> Tensor:
    """0.5 * (1 - soft Dice) + 0.5 * BCE, averaged over the episodes in the batch."""
    dtype = weights.dtype
    logits = forward_logits(weights, Tensor(q, dtype=dtype), Tensor(ci, dtype=dtype), Tensor(cm, dtype=dtype))
    target = Tensor(t, dtype=dtype)
    probs = ops.sigmoid(logits)
    dice = ops.mean(soft_dice_per_item(probs, target))
    # BCE from logits: softplus(z) - t z
    bce = ops.mean(ops.sub(ops.softplus(logits), ops.mul(logits, target)))
    return ops.add(ops.mul(ops.sub(1.0, dice), 0.5), ops.mul(bce, 0.5))


def validation_dice(weights: ModelWeights, master_seed: int, episodes: int, context_size: int,
                    side: int) -> float:
    """Mean hard Dice over held-out in-distribution episodes."""
    scores = []
    for i in range(episodes):
        query, support = sample_episode(master_seed, i, context_size, side, split="val")
        pred = forward(weights, query.image, support)
        scores.append(hard_dice(pred, query.mask))
    return float(np.mean(scores))


def train_backbone(cfg: TrainConfig, log_path: Optional[Path] = None,
                   progress: Optional[Callable[[int, float, Optional[float]], None]] = None) -> ModelWeights:
    """Train from a seeded initialisation; deterministic for a fixed config with workers=1."""
    arch = Architecture(levels=cfg.levels, base_channels=cfg.base_channels, image_side=cfg.side)
    weights = ModelWeights.initialize(arch, seed=cfg.seed)
    params = weights.parameters()
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    opt = Adam(params, lr=cfg.lr)

    def render(step):
        first = step * cfg.batch_episodes
        idx = range(first, first + cfg.batch_episodes)
        if pool is None:
            return [sample_episode(cfg.seed, i, cfg.context_size, cfg.side) for i in idx]
        return list(pool.map(lambda i: sample_episode(cfg.seed, i, cfg.context_size, cfg.side), idx))

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(["step", "loss", "val_dice"])
        for step in range(1, cfg.steps + 1):
            batch = _batch_arrays(render(step - 1))
            opt.zero_grad()
            with Graph() as graph:
                loss = episode_loss(weights, *batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"diverged at step {step}: loss={value}")
            graph.backward(loss)
            opt.step()

            val = None
            if step % cfg.val_every == 0 or step == cfg.steps:
                val = validation_dice(weights, cfg.seed, cfg.val_episodes, cfg.context_size, cfg.side)
                log.info("step %d loss %.4f val_dice %.4f", step, value, val)
            if writer:
                writer.writerow([step, repr(value), "" if val is None else repr(val)])
            if progress:
                progress(step, value, val)
    finally:
        if fh:
            fh.close()
        if pool:
            pool.shutdown()

    for p in params:
        p.requires_grad = False
        p.grad = None
    return weights
