"""Neural building blocks: linear, layer norm, GeLU, softmax, dropout,
depthwise 1-D convolution, sinusoidal positions and conv subsampling.

The heavier ops are fused primitives with hand-written backward rules; they
register in :data:`branchformer.tensor.PRIMITIVES` like the core ops do.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, ShapeError
from .tensor import DTYPE, Function, Tensor, mul_const, parameter, reshape, transpose

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- parameter containers ----------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor  # in x out
    bias: Tensor | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-12


@dataclass
class DepthwiseConvParams:
    kernel: Tensor  # channels x K
    bias: Tensor

    @property
    def width(self) -> int:
        return self.kernel.shape[1]


@dataclass
class SubsamplerParams:
    conv1_weight: Tensor  # C x 1 x 3 x 3
    conv1_bias: Tensor
    conv2_weight: Tensor  # C x C x 3 x 3
    conv2_bias: Tensor
    out: LinearParams  # C * F'' -> d


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested dataclasses/lists and yield every Tensor leaf with a dotted name."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            if child is not None:
                yield from named_parameters(child, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_parameters(child, f"{prefix}.{i}" if prefix else str(i))


def parameter_count(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True) -> LinearParams:
    w = parameter(init_uniform(rng, (n_in, n_out), n_in))
    b = parameter(np.zeros(n_out)) if bias else None
    return LinearParams(w, b)


def init_layer_norm(d: int, eps: float = 1e-12) -> LayerNormParams:
    return LayerNormParams(parameter(np.ones(d)), parameter(np.zeros(d)), eps)


def init_depthwise_conv(rng: np.random.Generator, channels: int, width: int) -> DepthwiseConvParams:
    if width % 2 == 0 or width < 1:
        raise ConfigError(f"depthwise kernel width must be odd, got {width}")
    # bias 1 puts the gate near identity at initialization
    return DepthwiseConvParams(
        parameter(init_uniform(rng, (channels, width), width)),
        parameter(np.ones(channels)),
    )


def init_subsampler(rng: np.random.Generator, in_features: int, channels: int, d: int) -> SubsamplerParams:
    f_out = subsampled_length(subsampled_length(in_features))
    if f_out < 1:
        raise ConfigError(f"in_features={in_features} too small for two 3x3 stride-2 stages (need >= 7)")
    return SubsamplerParams(
        parameter(init_uniform(rng, (channels, 1, 3, 3), 9)),
        parameter(np.zeros(channels)),
        parameter(init_uniform(rng, (channels, channels, 3, 3), 9 * channels)),
        parameter(np.zeros(channels)),
        init_linear(rng, channels * f_out, d),
    )


# -- fused primitives ----------------------------------------------------------

class Linear(Function):
    name = "linear"

    @staticmethod
    def forward(ctx, x, w, b=None):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
        ctx.x, ctx.w = x, w
        ctx.has_bias = b is not None
        out = x @ w
        if b is not None:
            out += b
        return out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.x, ctx.w
        needs = ctx.needs_input_grad
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.T if needs[0] else None
        gw = x.reshape(-1, x.shape[-1]).T @ g2 if needs[1] else None
        if ctx.has_bias:
            return gx, gw, (g2.sum(axis=0) if needs[2] else None)
        return gx, gw

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 5)), rng.uniform(-2, 2, (5,))], {}


class LayerNorm(Function):
    name = "layer_norm"

    @staticmethod
    def forward(ctx, x, gamma, beta, eps: float = 1e-12):
        xc = x - x.mean(axis=-1, keepdims=True)
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        ctx.xhat, ctx.rstd, ctx.gamma = xhat, rstd, gamma
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, rstd, gamma = ctx.xhat, ctx.rstd, ctx.gamma
        needs = ctx.needs_input_grad
        gx = None
        if needs[0]:
            gh = g * gamma
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if needs[1] else None
        gbeta = g.sum(axis=lead) if needs[2] else None
        return gx, ggamma, gbeta

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 3, 5)), rng.uniform(-2, 2, (5,)), rng.uniform(-2, 2, (5,))], {"eps": 1e-12}


class Gelu(Function):
    name = "gelu"

    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        ctx.x, ctx.cdf = x, cdf
        return x * cdf

    @staticmethod
    def backward(ctx, g):
        x = ctx.x
        return (g * (ctx.cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4))], {}


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


class Softmax(Function):
    """Softmax over the last axis."""

    name = "softmax"

    @staticmethod
    def forward(ctx, x):
        y = _softmax(x)
        ctx.y = y
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4))], {}


class LogSoftmax(Function):
    name = "log_softmax"

    @staticmethod
    def forward(ctx, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        ctx.out = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g - np.exp(ctx.out) * g.sum(axis=-1, keepdims=True),)

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (3, 4))], {}


class DepthwiseConv1d(Function):
    """Per-channel cross-correlation along time with 'same' zero padding.

    x is (..., T, C), kernel (C, K), bias (C,).
    """

    name = "depthwise_conv1d"

    @staticmethod
    def forward(ctx, x, kernel, bias):
        channels, width = kernel.shape
        if x.shape[-1] != channels:
            raise ShapeError(f"depthwise_conv1d: input has {x.shape[-1]} channels, kernel {channels}")
        if width % 2 == 0:
            raise ConfigError(f"depthwise kernel width must be odd, got {width}")
        pad = (width - 1) // 2
        T = x.shape[-2]
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
        xpad = np.pad(x, widths)
        out = np.empty_like(x)
        out[...] = bias
        for k in range(width):
            out += xpad[..., k:k + T, :] * kernel[:, k]
        ctx.xpad, ctx.kernel, ctx.pad, ctx.T = xpad, kernel, pad, T
        return out

    @staticmethod
    def backward(ctx, g):
        xpad, kernel, pad, T = ctx.xpad, ctx.kernel, ctx.pad, ctx.T
        needs = ctx.needs_input_grad
        width = kernel.shape[1]
        lead = tuple(range(g.ndim - 1))
        gx = gk = None
        if needs[0]:
            gpad = np.zeros_like(xpad)
            for k in range(width):
                gpad[..., k:k + T, :] += g * kernel[:, k]
            gx = np.ascontiguousarray(gpad[..., pad:pad + T, :])
        if needs[1]:
            gk = np.empty_like(kernel)
            for k in range(width):
                gk[:, k] = (g * xpad[..., k:k + T, :]).sum(axis=lead)
        gb = g.sum(axis=lead) if needs[2] else None
        return gx, gk, gb

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 6, 3)), rng.uniform(-2, 2, (3, 3)), rng.uniform(-2, 2, (3,))], {}


class Conv2dStride2(Function):
    """Valid 3x3 (or kxk) convolution with stride 2 over (B, Cin, H, W) inputs."""

    name = "conv2d_stride2"

    @staticmethod
    def forward(ctx, x, weight, bias):
        cout, cin, kh, kw = weight.shape
        if x.ndim != 4 or x.shape[1] != cin:
            raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::2, ::2]
        B, _, ho, wo = windows.shape[:4]
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {(kh, kw)}")
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, cin * kh * kw)
        wmat = weight.reshape(cout, -1)
        out = cols @ wmat.T + bias
        ctx.cols, ctx.wmat, ctx.x_shape, ctx.w_shape, ctx.out_hw = cols, wmat, x.shape, weight.shape, (ho, wo)
        return np.ascontiguousarray(out.reshape(B, ho, wo, cout).transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, g):
        cout, cin, kh, kw = ctx.w_shape
        ho, wo = ctx.out_hw
        B = ctx.x_shape[0]
        needs = ctx.needs_input_grad
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = None
        if needs[0]:
            gcols = (g2 @ ctx.wmat).reshape(B, ho, wo, cin, kh, kw)
            gx = np.zeros(ctx.x_shape)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + 2 * ho:2, j:j + 2 * wo:2] += gcols[..., i, j].transpose(0, 3, 1, 2)
        if needs[1]:
            gw = (g2.T @ ctx.cols).reshape(ctx.w_shape)
        gb = g2.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    @classmethod
    def sample(cls, rng):
        return [rng.uniform(-2, 2, (2, 2, 7, 8)), rng.uniform(-2, 2, (3, 2, 3, 3)), rng.uniform(-2, 2, (3,))], {}


# -- functional API -------------------------------------------------------------

def linear(x: Tensor, p: LinearParams) -> Tensor:
    if p.bias is None:
        return Linear.apply(x, p.weight)
    return Linear.apply(x, p.weight, p.bias)


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"layer_norm: {x.shape[-1]} features but gamma has {p.gamma.shape[0]}")
    return LayerNorm.apply(x, p.gamma, p.beta, eps=p.eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def softmax_rows(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def log_softmax_rows(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: identity at inference, kept entries scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return mul_const(x, keep / (1.0 - p))


def depthwise_conv1d(x: Tensor, p: DepthwiseConvParams) -> Tensor:
    return DepthwiseConv1d.apply(x, p.kernel, p.bias)


def sinusoidal_pe(T: int, d: int) -> Tensor:
    if d % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(T, dtype=DTYPE)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2, dtype=DTYPE) / d)
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return Tensor(pe)


def subsampled_length(n: int) -> int:
    """Length after one valid 3-wide, stride-2 stage."""
    return (n - 3) // 2 + 1 if n >= 3 else 0


def conv_subsample(x: Tensor, p: SubsamplerParams) -> Tensor:
    """(B, T, F) or (T, F) features -> (B, T'', d) / (T'', d) via two stride-2 3x3 convs."""
    unbatched = x.ndim == 2
    T, F = x.shape[-2:]
    if subsampled_length(subsampled_length(T)) < 1:
        raise ShapeError(f"conv_subsample: sequence length {T} below minimum 7")
    B = 1 if unbatched else x.shape[0]
    h = reshape(x, (B, 1, T, F))
    h = gelu(Conv2dStride2.apply(h, p.conv1_weight, p.conv1_bias))
    h = gelu(Conv2dStride2.apply(h, p.conv2_weight, p.conv2_bias))
    _, C, t_out, f_out = h.shape
    h = reshape(transpose(h, (0, 2, 1, 3)), (B, t_out, C * f_out))
    out = linear(h, p.out)
    return reshape(out, out.shape[1:]) if unbatched else out
