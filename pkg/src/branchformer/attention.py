"""Global-context branch: multi-head self-attention and Fastformer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (
    LayerNormParams,
    LinearParams,
    dropout,
    init_layer_norm,
    init_linear,
    init_uniform,
    layer_norm,
    linear,
    softmax_rows,
)
from .tensor import Tensor, concat, expand, matmul, mul, parameter, reshape, scale, take, transpose

ATTENTION_KINDS = ("mhsa", "fastformer")


@dataclass
class MhsaParams:
    query: list[LinearParams]  # per head, d -> d/h
    key: list[LinearParams]  # bias-free
    value: list[LinearParams]
    out: LinearParams  # d -> d

    @property
    def heads(self) -> int:
        return len(self.query)


@dataclass
class AttnPoolingParams:
    w: Tensor  # (d,)


@dataclass
class FastformerParams:
    query: LinearParams  # d -> d, split into heads afterwards
    key: LinearParams
    value: LinearParams
    query_pool: list[AttnPoolingParams]  # per head, over d/h
    key_pool: list[AttnPoolingParams]
    transform: list[LinearParams]  # per head, d/h -> d/h
    out: LinearParams

    @property
    def heads(self) -> int:
        return len(self.query_pool)


@dataclass
class AttentionBranchParams:
    kind: str
    norm: LayerNormParams
    attn: MhsaParams | FastformerParams
    dropout: float = 0.0


@dataclass
class AttentionTrace:
    """Per-head attention-weight matrices, shape (..., T, T) each."""

    maps: list[np.ndarray] = field(default_factory=list)


def _check_heads(d: int, h: int) -> int:
    if h < 1 or d % h:
        raise ConfigError(f"model dim {d} is not divisible by head count {h}")
    return d // h


def init_mhsa(rng: np.random.Generator, d: int, h: int) -> MhsaParams:
    dk = _check_heads(d, h)
    # a key bias only shifts each score row by a constant, which softmax ignores
    return MhsaParams(
        [init_linear(rng, d, dk) for _ in range(h)],
        [init_linear(rng, d, dk, bias=False) for _ in range(h)],
        [init_linear(rng, d, dk) for _ in range(h)],
        init_linear(rng, d, d),
    )


def init_pooling(rng: np.random.Generator, d: int) -> AttnPoolingParams:
    return AttnPoolingParams(parameter(init_uniform(rng, (d,), d)))


def init_fastformer(rng: np.random.Generator, d: int, h: int) -> FastformerParams:
    dk = _check_heads(d, h)
    return FastformerParams(
        init_linear(rng, d, d),
        init_linear(rng, d, d),
        init_linear(rng, d, d),
        [init_pooling(rng, dk) for _ in range(h)],
        [init_pooling(rng, dk) for _ in range(h)],
        [init_linear(rng, dk, dk) for _ in range(h)],
        init_linear(rng, d, d),
    )


def init_attention_branch(
    rng: np.random.Generator, kind: str, d: int, h: int, dropout_rate: float = 0.0
) -> AttentionBranchParams:
    if kind == "mhsa":
        attn = init_mhsa(rng, d, h)
    elif kind == "fastformer":
        attn = init_fastformer(rng, d, h)
    else:
        raise ConfigError(f"unknown attention kind {kind!r}; expected one of {ATTENTION_KINDS}")
    return AttentionBranchParams(kind, init_layer_norm(d), attn, dropout_rate)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, trace: AttentionTrace | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(dk)) V, with dk the per-head feature size."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention: query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    weights = softmax_rows(scores)
    if trace is not None:
        trace.maps.append(weights.data)
    return matmul(weights, V)


def multi_head_attention(x: Tensor, p: MhsaParams, trace: AttentionTrace | None = None) -> Tensor:
    _check_heads(x.shape[-1], p.heads)
    heads = [
        scaled_dot_attention(linear(x, q), linear(x, k), linear(x, v), trace)
        for q, k, v in zip(p.query, p.key, p.value)
    ]
    joined = heads[0] if len(heads) == 1 else concat(heads, axis=-1)
    return linear(joined, p.out)


def attention_pooling(Y: Tensor, p: AttnPoolingParams) -> Tensor:
    """Summarize (..., T, d) rows into one (..., d) vector by softmax(Y w / sqrt(d))."""
    d = Y.shape[-1]
    if p.w.shape != (d,):
        raise ShapeError(f"attention pooling: vector {p.w.shape} does not match feature size {d}")
    scores = scale(matmul(Y, reshape(p.w, (d, 1))), 1.0 / math.sqrt(d))
    lead = Y.shape[:-2]
    T = Y.shape[-2]
    alpha = softmax_rows(reshape(scores, lead + (T,)))
    pooled = matmul(reshape(alpha, lead + (1, T)), Y)
    return reshape(pooled, lead + (d,))


def fastformer(x: Tensor, p: FastformerParams) -> Tensor:
    d = x.shape[-1]
    dk = _check_heads(d, p.heads)
    T = x.shape[-2]
    Q, K, V = linear(x, p.query), linear(x, p.key), linear(x, p.value)
    heads = []
    for i in range(p.heads):
        q = take(Q, -1, i * dk, (i + 1) * dk)
        k = take(K, -1, i * dk, (i + 1) * dk)
        v = take(V, -1, i * dk, (i + 1) * dk)
        q_global = attention_pooling(q, p.query_pool[i])
        k_mixed = mul(expand(q_global, -2, T), k)
        k_global = attention_pooling(k_mixed, p.key_pool[i])
        v_mixed = mul(expand(k_global, -2, T), v)
        heads.append(linear(v_mixed, p.transform[i]) + q)
    joined = heads[0] if len(heads) == 1 else concat(heads, axis=-1)
    return linear(joined, p.out)


def attention_branch_forward(
    x: Tensor,
    p: AttentionBranchParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace: AttentionTrace | None = None,
) -> Tensor:
    h = layer_norm(x, p.norm)
    if p.kind == "mhsa":
        h = multi_head_attention(h, p.attn, trace)
    elif p.kind == "fastformer":
        h = fastformer(h, p.attn)
    else:
        raise ConfigError(f"unknown attention kind {p.kind!r}")
    return dropout(h, p.dropout, training, rng)
