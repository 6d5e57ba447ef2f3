"""Finite-difference checks for every primitive and for the full CCV loss."""

from __future__ import annotations

import numpy as np

from ..cycle import Prompt, apply_prompt, ccv_loss, cycle_verify, predict_query
from ..net.model import Architecture, ModelWeights
from ..synthetic import make_rng, render_pair, sample_task
from ..tensor import gradcheck

TOLERANCE = 1e-6
# The composed loss has large third derivatives; a 1e-4 step leaves O(h^2)
# truncation error near the tolerance, 1e-5 keeps both it and roundoff far below.
END_TO_END_STEP = 1e-5


def prompt_loss_case(seed: int = 0, side: int = 16, pairs: int = 2):
    """L = 1 - A as a function of the prompt, on a small float64 model."""
    arch = Architecture(levels=3, base_channels=4, image_side=side)
    weights = ModelWeights.initialize(arch, seed=seed, dtype=np.float64)
    spec = sample_task(seed, 0)
    rendered = [render_pair(spec, i, side) for i in range(pairs + 1)]
    query = rendered[0].image.astype(np.float64)
    context = [type(p)(p.image.astype(np.float64), p.mask.astype(np.float64)) for p in rendered[1:]]
    prompt = Prompt(query.shape, dtype=np.float64)
    prompt.values.data[...] = make_rng(seed, 99).normal(0, 0.05, size=query.shape)

    def fn():
        q_hat = apply_prompt(query, prompt)
        pred = predict_query(weights, q_hat, context)
        _, acc = cycle_verify(weights, q_hat, pred, context)
        return ccv_loss(acc)

    return fn, [prompt.values]


def all_cases(seed: int = 0, graphs: int = 5) -> dict:
    rng = np.random.default_rng(seed)
    cases = dict(gradcheck.primitive_cases(rng))
    for i in range(graphs):
        cases[f"random_graph_{i}"] = gradcheck.random_graph(rng)
    cases["prompt_cycle_loss"] = prompt_loss_case(seed)
    return cases


def run_checks(seed: int = 0, graphs: int = 5) -> list[tuple[str, float, bool]]:
    """(name, worst relative error, passed) for every case."""
    out = []
    for name, (fn, inputs) in all_cases(seed, graphs).items():
        step = END_TO_END_STEP if name == "prompt_cycle_loss" else gradcheck.STEP
        err = max(gradcheck.check(fn, inputs, step))
        out.append((name, err, err < TOLERANCE))
    return out
