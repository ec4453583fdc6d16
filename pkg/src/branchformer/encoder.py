"""Branchformer encoder: parallel attention and cgMLP branches, merged and
added back to the block input, stacked behind conv subsampling and
sinusoidal positions.

A plain pre-LN Transformer block is available as ``block_type="transformer"``
so attention behaviour can be compared against a single-branch control.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .attention import (
    ATTENTION_KINDS,
    AttentionBranchParams,
    AttentionTrace,
    AttnPoolingParams,
    attention_branch_forward,
    attention_pooling,
    init_attention_branch,
    init_pooling,
)
from .cgmlp import CgmlpParams, cgmlp_forward, init_cgmlp
from .errors import ConfigError, ShapeError
from .nn import (
    LayerNormParams,
    LinearParams,
    SubsamplerParams,
    conv_subsample,
    dropout,
    gelu,
    init_layer_norm,
    init_linear,
    init_subsampler,
    layer_norm,
    linear,
    sinusoidal_pe,
    softmax_rows,
    subsampled_length,
)
from .tensor import Tensor, add, concat, expand, mul, reshape, scale, take

MERGE_KINDS = ("concat", "weighted_average")
BLOCK_TYPES = ("branchformer", "transformer")

KEEP_BOTH = "keep-both"
DROP_ATTENTION = "drop-attention"


@dataclass(frozen=True)
class EncoderConfig:
    N: int = 2
    d: int = 16
    d_hidden: int = 64
    h: int = 2
    K: int = 7
    attention: str = "mhsa"
    merge: str = "concat"
    dropout: float = 0.1
    branch_dropout_p: float = 0.0
    seed: int = 0
    in_features: int = 8
    subsample_channels: int = 8
    block_type: str = "branchformer"

    def __post_init__(self):
        for name in ("N", "d", "d_hidden", "h", "K", "seed", "in_features", "subsample_channels"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.N < 0:
            raise ConfigError(f"N must be >= 0, got {self.N}")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"d must be even and >= 2, got {self.d}")
        if self.h < 1 or self.d % self.h:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        if self.d_hidden < 2 or self.d_hidden % 2:
            raise ConfigError(f"d_hidden must be even, got {self.d_hidden}")
        if self.K < 1 or self.K % 2 == 0:
            raise ConfigError(f"K must be odd, got {self.K}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.merge not in MERGE_KINDS:
            raise ConfigError(f"merge must be one of {MERGE_KINDS}, got {self.merge!r}")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.branch_dropout_p < 1.0:
            raise ConfigError(f"branch_dropout_p must be in [0, 1), got {self.branch_dropout_p}")
        if self.branch_dropout_p > 0 and self.merge != "weighted_average":
            raise ConfigError("branch dropout requires merge='weighted_average'")
        if self.in_features < 7:
            raise ConfigError(f"in_features must be >= 7 for two stride-2 stages, got {self.in_features}")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path) -> "EncoderConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "EncoderConfig":
        return dataclasses.replace(self, **changes)


# -- parameters ------------------------------------------------------------------

@dataclass
class ConcatMerge:
    W: LinearParams  # 2d -> d


@dataclass
class WeightedAverageMerge:
    pool_att: AttnPoolingParams
    pool_mlp: AttnPoolingParams
    proj_att: LinearParams  # d -> 1, no bias
    proj_mlp: LinearParams
    branch_dropout_p: float = 0.0


@dataclass
class BlockParams:
    attention: AttentionBranchParams | None  # None once pruned
    cgmlp: CgmlpParams
    merge: ConcatMerge | WeightedAverageMerge | None


@dataclass
class TransformerBlockParams:
    attention: AttentionBranchParams
    ffn_norm: LayerNormParams
    ffn_in: LinearParams
    ffn_out: LinearParams
    dropout: float = 0.0


@dataclass
class EncoderParams:
    subsampler: SubsamplerParams
    blocks: list[BlockParams | TransformerBlockParams]
    head: LinearParams | None = None
    pruned: bool = False


@dataclass
class Sinks:
    """Optional collectors filled during a forward pass, keyed by layer index."""

    attention: dict[int, AttentionTrace] | None = None
    weights: dict[int, list[np.ndarray]] | None = None
    attention_evals: int = 0
    attention_drops: int = 0

    @classmethod
    def collecting(cls, attention: bool = True, weights: bool = True) -> "Sinks":
        return cls(attention={} if attention else None, weights={} if weights else None)


def init_block(rng: np.random.Generator, cfg: EncoderConfig) -> BlockParams | TransformerBlockParams:
    if cfg.block_type == "transformer":
        return TransformerBlockParams(
            init_attention_branch(rng, "mhsa", cfg.d, cfg.h, cfg.dropout),
            init_layer_norm(cfg.d),
            init_linear(rng, cfg.d, cfg.d_hidden),
            init_linear(rng, cfg.d_hidden, cfg.d),
            cfg.dropout,
        )
    attention = init_attention_branch(rng, cfg.attention, cfg.d, cfg.h, cfg.dropout)
    cgmlp = init_cgmlp(rng, cfg.d, cfg.d_hidden, cfg.K, cfg.dropout)
    if cfg.merge == "concat":
        merge = ConcatMerge(init_linear(rng, 2 * cfg.d, cfg.d))
    else:
        merge = WeightedAverageMerge(
            init_pooling(rng, cfg.d),
            init_pooling(rng, cfg.d),
            init_linear(rng, cfg.d, 1, bias=False),
            init_linear(rng, cfg.d, 1, bias=False),
            cfg.branch_dropout_p,
        )
    return BlockParams(attention, cgmlp, merge)


def init_encoder(
    cfg: EncoderConfig, rng: np.random.Generator | None = None, num_classes: int = 0
) -> EncoderParams:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    sub = init_subsampler(rng, cfg.in_features, cfg.subsample_channels, cfg.d)
    blocks = [init_block(rng, cfg) for _ in range(cfg.N)]
    head = init_linear(rng, cfg.d, num_classes) if num_classes else None
    return EncoderParams(sub, blocks, head)


# -- merging -----------------------------------------------------------------------

def _check_pair(Y_att: Tensor, Y_mlp: Tensor) -> None:
    if Y_att.shape != Y_mlp.shape:
        raise ShapeError(f"merge: branch outputs {Y_att.shape} and {Y_mlp.shape} differ")


def merge_concat(Y_att: Tensor, Y_mlp: Tensor, p: ConcatMerge) -> Tensor:
    _check_pair(Y_att, Y_mlp)
    return linear(concat([Y_att, Y_mlp], axis=-1), p.W)


def _broadcast_weight(w: Tensor, like: Tensor) -> Tensor:
    """(..., 1) per-sequence weight -> (..., T, d)."""
    lead = like.shape[:-2]
    T, d = like.shape[-2:]
    return expand(expand(reshape(w, lead), -1, d), -2, T)


def merge_weighted_average(
    Y_att: Tensor,
    Y_mlp: Tensor,
    p: WeightedAverageMerge,
    weight_sink: list[np.ndarray] | None = None,
    force_weights: tuple[float, float] | None = None,
) -> Tensor:
    """w_att * Y_att + w_mlp * Y_mlp with (w_att, w_mlp) = softmax of pooled projections."""
    _check_pair(Y_att, Y_mlp)
    if force_weights is not None:
        w_att, w_mlp = force_weights
        if weight_sink is not None:
            weight_sink.append(np.broadcast_to(np.array([w_att, w_mlp]), Y_att.shape[:-2] + (2,)).copy())
        return add(scale(Y_att, w_att), scale(Y_mlp, w_mlp))
    s_att = linear(attention_pooling(Y_att, p.pool_att), p.proj_att)
    s_mlp = linear(attention_pooling(Y_mlp, p.pool_mlp), p.proj_mlp)
    w = softmax_rows(concat([s_att, s_mlp], axis=-1))
    if weight_sink is not None:
        weight_sink.append(w.data.copy())
    w_att = _broadcast_weight(take(w, -1, 0, 1), Y_att)
    w_mlp = _broadcast_weight(take(w, -1, 1, 2), Y_mlp)
    return add(mul(w_att, Y_att), mul(w_mlp, Y_mlp))


def branch_dropout(merge, training: bool, rng: np.random.Generator | None) -> str:
    """Decide, once per block per forward pass, whether to skip the attention branch."""
    if not isinstance(merge, WeightedAverageMerge):
        raise ConfigError("branch dropout is only defined for weighted-average merging")
    p = merge.branch_dropout_p
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"branch dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return KEEP_BOTH
    return DROP_ATTENTION if rng.random() < p else KEEP_BOTH


# -- forward -------------------------------------------------------------------------

def _layer_trace(sinks: Sinks | None, layer: int) -> AttentionTrace | None:
    if sinks is None or sinks.attention is None:
        return None
    return sinks.attention.setdefault(layer, AttentionTrace())


def _layer_weights(sinks: Sinks | None, layer: int) -> list[np.ndarray] | None:
    if sinks is None or sinks.weights is None:
        return None
    return sinks.weights.setdefault(layer, [])


def transformer_block_forward(
    x: Tensor, p: TransformerBlockParams, training: bool, rng, sinks: Sinks | None, layer: int
) -> Tensor:
    x = add(x, attention_branch_forward(x, p.attention, training, rng, _layer_trace(sinks, layer)))
    if sinks is not None:
        sinks.attention_evals += 1
    h = linear(gelu(linear(layer_norm(x, p.ffn_norm), p.ffn_in)), p.ffn_out)
    return add(x, dropout(h, p.dropout, training, rng))


def block_forward(
    x: Tensor,
    p: BlockParams | TransformerBlockParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    sinks: Sinks | None = None,
    layer: int = 0,
    force_weights: tuple[float, float] | None = None,
) -> Tensor:
    """x + Merge(AttentionBranch(x), CgmlpBranch(x)); both branches read the same x."""
    if isinstance(p, TransformerBlockParams):
        return transformer_block_forward(x, p, training, rng, sinks, layer)
    weight_sink = None if isinstance(p.merge, ConcatMerge) else _layer_weights(sinks, layer)
    if p.attention is None:
        decision = DROP_ATTENTION
    elif isinstance(p.merge, WeightedAverageMerge):
        decision = branch_dropout(p.merge, training, rng)
    else:
        decision = KEEP_BOTH
    # cgMLP first so its dropout masks do not depend on whether attention runs
    y_mlp = cgmlp_forward(x, p.cgmlp, training, rng)
    if decision == DROP_ATTENTION:
        if sinks is not None:
            sinks.attention_drops += 1
        if weight_sink is not None:
            weight_sink.append(np.broadcast_to(np.array([0.0, 1.0]), x.shape[:-2] + (2,)).copy())
        return add(x, y_mlp)
    y_att = attention_branch_forward(x, p.attention, training, rng, _layer_trace(sinks, layer))
    if sinks is not None:
        sinks.attention_evals += 1
    if isinstance(p.merge, ConcatMerge):
        merged = merge_concat(y_att, y_mlp, p.merge)
    else:
        merged = merge_weighted_average(y_att, y_mlp, p.merge, weight_sink, force_weights)
    return add(x, merged)


def encoder_forward(
    features: Tensor,
    cfg: EncoderConfig,
    params: EncoderParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    sinks: Sinks | None = None,
    force_weights: tuple[float, float] | None = None,
) -> Tensor:
    """(B, T, F) or (T, F) features -> (B, T', d) / (T', d) encodings."""
    if training and rng is None:
        rng = np.random.default_rng(cfg.seed)
    h = conv_subsample(features, params.subsampler)
    pe = sinusoidal_pe(h.shape[-2], cfg.d)
    if h.ndim == 3:
        pe = expand(pe, 0, h.shape[0])
    h = add(h, pe)
    for i, block in enumerate(params.blocks):
        h = block_forward(h, block, training, rng, sinks, i, force_weights)
    return h


def prune_to_cgmlp(params: EncoderParams) -> EncoderParams:
    """Drop every attention branch; each block becomes x + cgMLP(x).

    Matches the unpruned model run with weights forced to (0, 1), so it only
    makes sense for weighted-average merging.
    """
    blocks = []
    for i, b in enumerate(params.blocks):
        if isinstance(b, TransformerBlockParams) or (
            b.attention is not None and not isinstance(b.merge, WeightedAverageMerge)
        ):
            raise ConfigError(f"block {i}: pruning is unsupported without weighted-average merging")
        blocks.append(BlockParams(None, b.cgmlp, None))
    return EncoderParams(params.subsampler, blocks, params.head, pruned=True)


def output_length(T: int) -> int:
    return subsampled_length(subsampled_length(T))
