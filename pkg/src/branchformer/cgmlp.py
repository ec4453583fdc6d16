"""Local-context branch: MLP with convolutional gating.

    Z  = GeLU(LN(X) U)                 (T, d_hidden)
    Z~ = Z1 * DWConv(LN(Z2))           (T, d_hidden/2), linear gating
    Y  = Dropout(Z~ V)                 (T, d)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (
    DepthwiseConvParams,
    LayerNormParams,
    LinearParams,
    depthwise_conv1d,
    dropout,
    gelu,
    init_depthwise_conv,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)
from .tensor import Tensor, mul, split


@dataclass
class CsguParams:
    norm: LayerNormParams  # over d_hidden/2
    conv: DepthwiseConvParams  # d_hidden/2 channels


@dataclass
class CgmlpParams:
    norm: LayerNormParams  # branch entry, over d
    U: LinearParams  # d -> d_hidden
    csgu: CsguParams
    V: LinearParams  # d_hidden/2 -> d
    dropout: float = 0.0


def init_csgu(rng: np.random.Generator, d_hidden: int, kernel: int) -> CsguParams:
    if d_hidden % 2:
        raise ConfigError(f"d_hidden must be even, got {d_hidden}")
    half = d_hidden // 2
    return CsguParams(init_layer_norm(half), init_depthwise_conv(rng, half, kernel))


def init_cgmlp(
    rng: np.random.Generator, d: int, d_hidden: int, kernel: int, dropout_rate: float = 0.0
) -> CgmlpParams:
    return CgmlpParams(
        init_layer_norm(d),
        init_linear(rng, d, d_hidden),
        init_csgu(rng, d_hidden, kernel),
        init_linear(rng, d_hidden // 2, d),
        dropout_rate,
    )


def csgu(Z: Tensor, p: CsguParams) -> Tensor:
    if Z.shape[-1] % 2:
        raise ConfigError(f"CSGU input feature size must be even, got {Z.shape[-1]}")
    z1, z2 = split(Z, 2, axis=-1)
    if z2.shape[-1] != p.conv.kernel.shape[0]:
        raise ShapeError(f"CSGU: half width {z2.shape[-1]} != conv channels {p.conv.kernel.shape[0]}")
    gate = depthwise_conv1d(layer_norm(z2, p.norm), p.conv)
    return mul(z1, gate)


def cgmlp_forward(
    x: Tensor, p: CgmlpParams, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    z = gelu(linear(layer_norm(x, p.norm), p.U))
    y = linear(csgu(z, p.csgu), p.V)
    return dropout(y, p.dropout, training, rng)


def cgmlp_flop_estimate(T: int, d: int, d_hidden: int, K: int) -> int:
    """Multiply-accumulate count of the two projections plus the depthwise conv."""
    return T * d * d_hidden + T * d * d_hidden // 2 + T * K * d_hidden // 2
