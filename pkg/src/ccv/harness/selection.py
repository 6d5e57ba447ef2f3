"""Context-selection baselines: uniform random and feature nearest neighbours."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..net.model import ContextPair, ModelWeights, embed
from ..synthetic import make_rng

_SELECT_TAG = 5


def _check_k(k: int, n: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"cannot select {k} pairs from a pool of {n}")


def random_indices(pool_size: int, k: int, seed: int) -> list[int]:
    _check_k(k, pool_size)
    return [int(i) for i in make_rng(seed, _SELECT_TAG).choice(pool_size, size=k, replace=False)]


def select_context_random(pool: Sequence[ContextPair], k: int, seed: int) -> list[ContextPair]:
    return [pool[i] for i in random_indices(len(pool), k, seed)]


def cosine_scores(query_vec: np.ndarray, pool_vecs: np.ndarray) -> np.ndarray:
    q = np.asarray(query_vec, dtype=np.float64)
    p = np.asarray(pool_vecs, dtype=np.float64)
    denom = np.maximum(np.linalg.norm(p, axis=1) * np.linalg.norm(q), 1e-12)
    return p @ q / denom


def knn_indices(weights: ModelWeights, query, pool: Sequence[ContextPair], k: int) -> list[int]:
    """Pool indices ordered by descending cosine similarity of embeddings, ties by index."""
    _check_k(k, len(pool))
    qv = embed(weights, query)
    pv = np.stack([embed(weights, p.image) for p in pool])
    scores = cosine_scores(qv, pv)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(len(pool)), -scores))
    return [int(i) for i in order[:k]]


def select_context_knn(weights: ModelWeights, query, pool: Sequence[ContextPair], k: int) -> list[ContextPair]:
    return [pool[i] for i in knn_indices(weights, query, pool, k)]
