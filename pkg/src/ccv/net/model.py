"""Small in-context segmentation network.

A U-shaped network in the style of UniverSeg's cross-convolution: at every
encoder level each context pair's features are concatenated with the query
features, passed through a shared conv-relu, and averaged over pairs to form
the next query representation. The decoder only sees the query path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from ..tensor import Tensor
from ..tensor import ops

ArrayLike = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class Architecture:
    levels: int = 3
    base_channels: int = 16
    image_side: int = 64

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError(f"invalid architecture {self}")
        if self.image_side % (2 ** (self.levels - 1)):
            raise ValueError(f"image_side {self.image_side} not divisible by 2^(levels-1)")

    def channels(self) -> list[int]:
        # widths: base, base, 2*base, 2*base, ...
        return [self.base_channels * (2 if lvl >= 2 else 1) for lvl in range(self.levels)]

    def param_shapes(self) -> dict[str, tuple]:
        ch = self.channels()
        shapes = {}
        for lvl, c in enumerate(ch):
            cq = 1 if lvl == 0 else ch[lvl - 1]
            cs = 2 if lvl == 0 else ch[lvl - 1]
            # conv over concat(query, pair) split by input block
            shapes[f"enc{lvl}.cross_q.weight"] = (c, cq, 3, 3)
            shapes[f"enc{lvl}.cross_s.weight"] = (c, cs, 3, 3)
            shapes[f"enc{lvl}.cross.bias"] = (c,)
            shapes[f"enc{lvl}.query.weight"] = (c, c, 3, 3)
            shapes[f"enc{lvl}.query.bias"] = (c,)
        for lvl in range(self.levels - 2, -1, -1):
            shapes[f"dec{lvl}.weight"] = (ch[lvl], ch[lvl + 1] + ch[lvl], 3, 3)
            shapes[f"dec{lvl}.bias"] = (ch[lvl],)
        shapes["head.weight"] = (1, ch[0], 1, 1)
        shapes["head.bias"] = (1,)
        return shapes


@dataclass
class ModelWeights:
    arch: Architecture
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name}: shape {self.params[name].shape} != {shape}")

    @classmethod
    def initialize(cls, arch: Architecture = Architecture(), seed: int = 0,
                   dtype=np.float32) -> "ModelWeights":
        """He-normal kernels, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.param_shapes().items():
            if name.endswith("bias"):
                arr = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                if ".cross_" in name:
                    fan_in = sum(int(np.prod(v[1:])) for n, v in arch.param_shapes().items()
                                 if n.startswith(name.split(".")[0] + ".cross_"))
                arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            params[name] = Tensor(arr, dtype=dtype)
        return cls(arch, params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self, dtype=None, requires_grad: bool = False) -> "ModelWeights":
        return ModelWeights(self.arch, {
            k: Tensor(v.data.copy(), requires_grad=requires_grad, dtype=dtype or v.dtype)
            for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelWeights":
        return self.copy(dtype=dtype)

    def equal(self, other: "ModelWeights") -> bool:
        """Bit-exact equality of architecture and every parameter."""
        return (self.arch == other.arch and list(self.params) == list(other.params)
                and all(np.array_equal(self.params[k].data, other.params[k].data)
                        and self.params[k].dtype == other.params[k].dtype for k in self.params))


@dataclass
class ContextPair:
    """An image with its mask, both ``[1, H, W]`` in [0, 1]."""
    image: ArrayLike
    mask: ArrayLike

    def __post_init__(self):
        if tuple(self.image.shape) != tuple(self.mask.shape):
            raise ValueError(f"context pair: image {self.image.shape} and mask {self.mask.shape} differ")


ContextSet = Sequence[ContextPair]


def as_tensor(x: ArrayLike, dtype) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != dtype:
            raise ValueError(f"dtype mismatch: {x.dtype} vs model {dtype}")
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _check_image(name: str, t: Tensor, side: int) -> None:
    if t.shape[-3:] != (1, side, side):
        raise ValueError(f"{name}: expected [1, {side}, {side}], got {tuple(t.shape)}")


def forward_logits(weights: ModelWeights, query: Tensor, ctx_images: Tensor, ctx_masks: Tensor,
                   return_bottleneck: bool = False) -> Tensor:
    """Batched logits.

    query ``[B, 1, H, W]``; context images and masks ``[B, K, 1, H, W]``.
    Returns ``[B, 1, H, W]`` logits (or the bottleneck query features).
    """
    arch = weights.arch
    b, k = ctx_images.shape[:2]
    if query.shape[0] != b or ctx_masks.shape != ctx_images.shape:
        raise ValueError(f"batch mismatch: query {query.shape}, context {ctx_images.shape} / {ctx_masks.shape}")
    if k < 1:
        raise ValueError("empty context set")

    q = query
    s = ops.concat([ctx_images, ctx_masks], axis=2)
    skips = []
    for lvl in range(arch.levels):
        if lvl > 0:
            q = ops.avg_pool2(q)
            s = ops.avg_pool2(s)
        # conv(concat(q, s_n)) == conv_q(q) + conv_s(s_n); the query term is shared by all pairs
        zq = ops.conv2d(q, weights[f"enc{lvl}.cross_q.weight"], weights[f"enc{lvl}.cross.bias"])
        zs = ops.conv2d(s, weights[f"enc{lvl}.cross_s.weight"])
        s = ops.relu(ops.add(ops.expand(zq, 1, k), zs))
        q = ops.mean(s, axis=1, order_invariant=True)
        q = ops.relu(ops.conv2d(q, weights[f"enc{lvl}.query.weight"], weights[f"enc{lvl}.query.bias"]))
        skips.append(q)
    if return_bottleneck:
        return q

    d = skips[-1]
    for lvl in range(arch.levels - 2, -1, -1):
        d = ops.concat([ops.upsample2(d), skips[lvl]], axis=1)
        d = ops.relu(ops.conv2d(d, weights[f"dec{lvl}.weight"], weights[f"dec{lvl}.bias"]))
    return ops.conv2d(d, weights["head.weight"], weights["head.bias"], padding=0)


def _stack_context(weights: ModelWeights, context: ContextSet) -> tuple[Tensor, Tensor]:
    if len(context) == 0:
        raise ValueError("empty context set")
    dtype = weights.dtype
    side = weights.arch.image_side
    imgs, msks = [], []
    for i, pair in enumerate(context):
        img = as_tensor(pair.image, dtype)
        msk = as_tensor(pair.mask, dtype)
        _check_image(f"context image {i}", img, side)
        _check_image(f"context mask {i}", msk, side)
        imgs.append(img)
        msks.append(msk)
    return ops.stack(imgs, axis=0), ops.stack(msks, axis=0)


def forward(weights: ModelWeights, query: ArrayLike, context: ContextSet) -> Tensor:
    """Probability map ``[1, H, W]`` for ``query`` given the context pairs."""
    q = as_tensor(query, weights.dtype)
    _check_image("query", q, weights.arch.image_side)
    if q.ndim != 3:
        raise ValueError(f"query must be [1, H, W], got {q.shape}")
    imgs, msks = _stack_context(weights, context)
    logits = forward_logits(weights, ops.reshape(q, (1,) + q.shape),
                            ops.reshape(imgs, (1,) + imgs.shape),
                            ops.reshape(msks, (1,) + msks.shape))
    return ops.sigmoid(ops.reshape(logits, q.shape))


def forward_shared_context(weights: ModelWeights, queries: ArrayLike, image: ArrayLike,
                           mask: ArrayLike) -> Tensor:
    """Probabilities ``[B, 1, H, W]`` for B queries that all use one context pair."""
    dtype = weights.dtype
    qs = as_tensor(queries, dtype)
    img = as_tensor(image, dtype)
    msk = as_tensor(mask, dtype)
    side = weights.arch.image_side
    _check_image("queries", qs, side)
    _check_image("context image", img, side)
    _check_image("context mask", msk, side)
    b = qs.shape[0]
    imgs = ops.expand(ops.reshape(img, (1,) + img.shape), 0, b)
    msks = ops.expand(ops.reshape(msk, (1,) + msk.shape), 0, b)
    return ops.sigmoid(forward_logits(weights, qs, imgs, msks))


def embed(weights: ModelWeights, image: ArrayLike) -> np.ndarray:
    """Global-average-pooled bottleneck features of ``image``.

    The image is fed as the query with itself and an empty mask as the sole
    context pair, so the embedding depends on the image alone.
    """
    dtype = weights.dtype
    img = as_tensor(image, dtype)
    _check_image("image", img, weights.arch.image_side)
    q = ops.reshape(img, (1,) + img.shape)
    ctx = ops.reshape(img, (1, 1) + img.shape)
    zeros = Tensor(np.zeros(ctx.shape), dtype=dtype)
    feats = forward_logits(weights, q, ctx, zeros, return_bottleneck=True)
    return feats.data[0].mean(axis=(1, 2))
