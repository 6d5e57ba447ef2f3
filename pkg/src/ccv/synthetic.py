"""Seeded synthetic binary-segmentation tasks.

A task fixes a shape family and an appearance (foreground/background
intensity, texture, noise); instances of a task vary in geometry and noise.

Randomness: every stream is numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence`` with an integer entropy list
``[master_seed, task_id, ..., purpose_tag]``. Both algorithms are specified
and stable across numpy releases, so streams can be reproduced elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import ndimage

from .net.model import ContextPair
from .tensor import Tensor

SHAPE_FAMILIES = ("ellipse", "rectangle", "ring", "two-blob")
SHIFT_KINDS = ("none", "gamma", "intensity_offset", "blur")

SIZE_BOUNDS = (0.2, 0.6)
INTENSITY_BOUNDS = (0.15, 0.85)
MIN_CONTRAST = 0.25
TEXTURE_MAX = 0.05
NOISE_BOUNDS = (0.01, 0.06)
AREA_BOUNDS = (0.02, 0.6)

_TASK_TAG = 1
_RENDER_TAG = 2
_SPLIT_TAG = 3


def make_rng(*entropy: int) -> np.random.Generator:
    """PCG64 generator seeded from a list of non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(e) for e in entropy])))


@dataclass(frozen=True)
class TaskSpec:
    master_seed: int
    task_id: int
    shape_family: str
    size_range: tuple
    fg_mean: float
    bg_mean: float
    texture_amplitude: float
    noise_sigma: float


def sample_task(master_seed: int, task_id: int) -> TaskSpec:
    rng = make_rng(master_seed, task_id, _TASK_TAG)
    family = SHAPE_FAMILIES[int(rng.integers(len(SHAPE_FAMILIES)))]
    lo = float(rng.uniform(SIZE_BOUNDS[0], 0.4))
    hi = float(rng.uniform(lo + 0.1, SIZE_BOUNDS[1]))
    while True:
        fg, bg = (float(v) for v in rng.uniform(*INTENSITY_BOUNDS, size=2))
        if abs(fg - bg) >= MIN_CONTRAST:
            break
    return TaskSpec(
        master_seed=int(master_seed),
        task_id=int(task_id),
        shape_family=family,
        size_range=(lo, hi),
        fg_mean=fg,
        bg_mean=bg,
        texture_amplitude=float(rng.uniform(0, TEXTURE_MAX)),
        noise_sigma=float(rng.uniform(*NOISE_BOUNDS)),
    )


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _draw_mask(family: str, extent: float, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    half = extent / 2
    theta = float(rng.uniform(0, math.pi))
    if family == "two-blob":
        mask = np.zeros((side, side), dtype=bool)
        for _ in range(2):
            r = half * float(rng.uniform(0.45, 0.7))
            cx, cy = rng.uniform(r, side - r, size=2)
            mask |= _ellipse(xx, yy, cx, cy, r, r * float(rng.uniform(0.7, 1.0)), theta)
        return mask
    cx, cy = rng.uniform(half, side - half, size=2)
    if family == "ellipse":
        return _ellipse(xx, yy, cx, cy, half, half * float(rng.uniform(0.5, 1.0)), theta)
    if family == "rectangle":
        hb = half * float(rng.uniform(0.5, 1.0))
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (np.abs(u) <= 0.8 * half) & (np.abs(v) <= 0.8 * hb)
    if family == "ring":
        b = half * float(rng.uniform(0.75, 1.0))
        inner = float(rng.uniform(0.4, 0.65))
        outer = _ellipse(xx, yy, cx, cy, half, b, theta)
        hole = _ellipse(xx, yy, cx, cy, half * inner, b * inner, theta)
        return outer & ~hole
    raise ValueError(f"unknown shape family {family!r}")


def render_pair(spec: TaskSpec, instance_seed: int, side: int = 64) -> ContextPair:
    """Render one (image, mask) instance of ``spec`` as float32 ``[1, side, side]`` arrays."""
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    rng = make_rng(spec.master_seed, spec.task_id, instance_seed, _RENDER_TAG)
    while True:
        extent = float(rng.uniform(*spec.size_range)) * side
        mask = _draw_mask(spec.shape_family, extent, side, rng)
        area = mask.mean()
        if AREA_BOUNDS[0] <= area <= AREA_BOUNDS[1]:
            break

    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    freq = float(rng.uniform(4, 8))
    phi = float(rng.uniform(0, 2 * math.pi))
    phase = float(rng.uniform(0, 2 * math.pi))
    texture = spec.texture_amplitude * np.sin(
        2 * math.pi * freq * (xx * math.cos(phi) + yy * math.sin(phi)) / side + phase)
    noise = rng.standard_normal((side, side)) * spec.noise_sigma
    image = np.where(mask, spec.fg_mean, spec.bg_mean)
    if spec.texture_amplitude:
        image = image + texture
    if spec.noise_sigma:
        image = image + noise
    image = np.clip(image, 0.0, 1.0)
    return ContextPair(image[None].astype(np.float32), mask[None].astype(np.float32))


@dataclass(frozen=True)
class SplitSpec:
    test_ids: tuple
    val_ids: tuple
    context_ids: tuple


def split_sizes(pool_size: int) -> tuple[int, int, int]:
    """Test gets ceil(3k), val ceil(k) of the remainder, context the rest (k = pool/5)."""
    n_test = -(-3 * pool_size // 5)
    n_val = min(-(-pool_size // 5), pool_size - n_test)
    return n_test, n_val, pool_size - n_test - n_val


def make_splits(pool_size: int, seed: int) -> SplitSpec:
    if pool_size < 5:
        raise ValueError(f"pool_size must be >= 5, got {pool_size}")
    n_test, n_val, _ = split_sizes(pool_size)
    perm = make_rng(seed, pool_size, _SPLIT_TAG).permutation(pool_size)
    return SplitSpec(
        test_ids=tuple(sorted(int(i) for i in perm[:n_test])),
        val_ids=tuple(sorted(int(i) for i in perm[n_test:n_test + n_val])),
        context_ids=tuple(sorted(int(i) for i in perm[n_test + n_val:])),
    )


def apply_query_shift(image: Union[np.ndarray, Tensor], kind: str, magnitude: float) -> np.ndarray:
    """Intensity/appearance shift applied to a query image; output in [0, 1].

    gamma: v -> v ** (1 + m); intensity_offset: v -> v + m; blur: Gaussian of
    standard deviation m pixels over the spatial axes.
    """
    if kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")
    if magnitude < 0:
        raise ValueError(f"shift magnitude must be >= 0, got {magnitude}")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if kind == "none" or magnitude == 0:
        return arr.copy()
    if kind == "gamma":
        out = np.clip(arr, 0, 1) ** (1 + magnitude)
    elif kind == "intensity_offset":
        out = arr + magnitude
    else:
        sigma = [0] * (arr.ndim - 2) + [magnitude, magnitude]
        out = ndimage.gaussian_filter(arr.astype(np.float64), sigma=sigma, mode="reflect")
    return np.clip(out, 0, 1).astype(arr.dtype, copy=False)
