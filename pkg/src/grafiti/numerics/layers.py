"""Layer primitives: affine maps, ReLU, multi-head attention, attention blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Segments, ShapeError, Tensor


@dataclass(frozen=True)
class AffineParams:
    weight: Tensor  # [in_dim, out_dim]
    bias: Tensor  # [out_dim]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"affine params: weight {self.weight.shape} inconsistent with bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class MhaParams:
    query: AffineParams
    key: AffineParams
    value: AffineParams
    out: AffineParams
    heads: int

    def __post_init__(self):
        d = self.query.out_dim
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"model_dim {d} not divisible by {self.heads} heads")
        if self.key.out_dim != d or self.value.out_dim != d or self.out.in_dim != d:
            raise ShapeError("attention projections disagree on model_dim")
        if self.key.in_dim != self.value.in_dim:
            raise ShapeError("key and value projections must read the same width")

    @property
    def model_dim(self) -> int:
        return self.query.out_dim


@dataclass(frozen=True)
class MabParams:
    mha: MhaParams
    ff: AffineParams


def init_affine(rng: np.random.Generator, in_dim: int, out_dim: int) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias."""
    bound = math.sqrt(1.0 / in_dim)
    return {
        "weight": rng.uniform(-bound, bound, size=(in_dim, out_dim)),
        "bias": np.zeros(out_dim),
    }


def affine(p: AffineParams, x: Tensor) -> Tensor:
    if x.ndim < 1 or x.shape[-1] != p.in_dim:
        raise ShapeError(f"affine: input {x.shape} does not match weight {p.weight.shape}")
    return T.add(T.matmul(x, p.weight), p.bias)


def activation(x: Tensor) -> Tensor:
    return T.relu(x)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return T.reshape(x, (n, heads, d // heads))


def mha(p: MhaParams, query: Tensor, keys: Tensor, values: Tensor, mask) -> Tensor:
    """Scaled dot-product attention with a dense ``[q, k]`` boolean mask."""
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(f"mha: {keys.shape[0]} keys vs {values.shape[0]} values")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (query.shape[0], keys.shape[0]):
        raise ShapeError(f"mha: mask {mask.shape} for {query.shape[0]} queries, {keys.shape[0]} keys")
    h, dh = p.heads, p.model_dim // p.heads
    q = T.transpose(_split_heads(affine(p.query, query), h), (1, 0, 2))  # [h, q, dh]
    k = T.transpose(_split_heads(affine(p.key, keys), h), (1, 2, 0))  # [h, dh, k]
    v = T.transpose(_split_heads(affine(p.value, values), h), (1, 0, 2))  # [h, k, dh]
    scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(dh))
    weights = T.masked_softmax(scores, mask[None])
    ctx = T.transpose(T.matmul(weights, v), (1, 0, 2))  # [q, h, dh]
    return affine(p.out, T.reshape(ctx, (query.shape[0], p.model_dim)))


def graph_mha(p: MhaParams, query: Tensor, keys: Tensor, values: Tensor, owners: Segments) -> Tensor:
    """Attention where key row ``j`` is visible only to query row ``owners.ids[j]``.

    Equivalent to :func:`mha` with ``mask[i, j] = owners.ids[j] == i`` but
    costs O(number of keys) instead of O(queries * keys).  Query rows that
    own no keys receive a zero attention context.
    """
    if owners.count != query.shape[0] or len(owners) != keys.shape[0]:
        raise ShapeError(
            f"graph_mha: owners map {len(owners)} keys onto {owners.count} rows; "
            f"got keys {keys.shape}, queries {query.shape}"
        )
    h, dh = p.heads, p.model_dim // p.heads
    q = _split_heads(affine(p.query, query), h)
    k = _split_heads(affine(p.key, keys), h)
    v = _split_heads(affine(p.value, values), h)
    scores = T.mul(T.sum(T.mul(T.gather(q, owners), k), axis=-1), 1.0 / math.sqrt(dh))  # [m, h]
    weights = T.segment_softmax(scores, owners)
    ctx = T.segment_sum(T.mul(T.reshape(weights, weights.shape + (1,)), v), owners)
    return affine(p.out, T.reshape(ctx, (query.shape[0], p.model_dim)))


def mab(p: MabParams, Q: Tensor, K: Tensor, V: Tensor, mask) -> Tensor:
    """Residual attention block: relu(H + FF(H)), H = relu(Q + MHA(Q, K, V)).

    ``mask`` is a dense boolean ``[q, k]`` array or a :class:`Segments` owner map.
    """
    if isinstance(mask, Segments):
        att = graph_mha(p.mha, Q, K, V, mask)
    else:
        att = mha(p.mha, Q, K, V, mask)
    if att.shape != Q.shape:
        raise ShapeError(f"mab: attention output {att.shape} cannot be added to queries {Q.shape}")
    H = activation(T.add(Q, att))
    return activation(T.add(H, affine(p.ff, H)))
