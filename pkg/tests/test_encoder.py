import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from branchformer.attention import AttnPoolingParams, attention_branch_forward
from branchformer.cgmlp import cgmlp_forward
from branchformer.encoder import (
    DROP_ATTENTION,
    KEEP_BOTH,
    BlockParams,
    ConcatMerge,
    EncoderConfig,
    Sinks,
    WeightedAverageMerge,
    block_forward,
    branch_dropout,
    encoder_forward,
    init_block,
    init_encoder,
    merge_concat,
    merge_weighted_average,
    output_length,
    prune_to_cgmlp,
)
from branchformer.errors import ConfigError
from branchformer.nn import LinearParams, conv_subsample, named_parameters, parameter_count, sinusoidal_pe
from branchformer.tensor import Tensor, add

seeds = st.integers(0, 2**31 - 1)


def _wa(d, rng, p=0.0, scale=1.0):
    return WeightedAverageMerge(
        AttnPoolingParams(Tensor(rng.normal(scale=scale, size=d))),
        AttnPoolingParams(Tensor(rng.normal(scale=scale, size=d))),
        LinearParams(Tensor(rng.normal(scale=scale, size=(d, 1)))),
        LinearParams(Tensor(rng.normal(scale=scale, size=(d, 1)))),
        p,
    )


# -- merges ---------------------------------------------------------------------

def test_concat_selector_and_adder():
    rng = np.random.default_rng(0)
    a, m = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
    I, Z = np.eye(2), np.zeros((2, 2))
    sel = ConcatMerge(LinearParams(Tensor(np.vstack([I, Z])), Tensor(np.zeros(2))))
    assert np.array_equal(merge_concat(a, m, sel).data, a.data)
    adder = ConcatMerge(LinearParams(Tensor(np.vstack([I, I])), Tensor(np.zeros(2))))
    assert np.allclose(merge_concat(a, m, adder).data, a.data + m.data, atol=1e-15)


def test_concat_matches_explicit_oracle():
    rng = np.random.default_rng(1)
    a, m = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    W, b = rng.normal(size=(4, 2)), rng.normal(size=2)
    out = merge_concat(Tensor(a), Tensor(m), ConcatMerge(LinearParams(Tensor(W), Tensor(b)))).data
    assert np.allclose(out, np.hstack([a, m]) @ W + b, atol=1e-14)


def test_weighted_average_equal_branches():
    rng = np.random.default_rng(2)
    y = Tensor(rng.normal(size=(4, 3)))
    assert np.allclose(merge_weighted_average(y, y, _wa(3, rng, scale=4.0)).data, y.data, atol=1e-15)


def test_weighted_average_symmetric_projection_gives_midpoint():
    rng = np.random.default_rng(3)
    p = _wa(3, rng)
    p.proj_att.weight.data[:] = 0.0
    p.proj_mlp.weight.data[:] = 0.0
    a, m = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    sink = []
    out = merge_weighted_average(a, m, p, weight_sink=sink).data
    assert sink[0].tolist() == [0.5, 0.5]
    assert np.allclose(out, (a.data + m.data) / 2, atol=1e-15)


def test_weighted_average_scalar_trace():
    p = WeightedAverageMerge(
        AttnPoolingParams(Tensor([0.7])),
        AttnPoolingParams(Tensor([-1.3])),
        LinearParams(Tensor([[2.0]])),
        LinearParams(Tensor([[-0.5]])),
    )
    ya, ym = 1.5, -0.8
    # T=1: pooling returns the single value
    s = np.array([ya * 2.0, ym * -0.5])
    w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    out = merge_weighted_average(Tensor([[ya]]), Tensor([[ym]]), p).item()
    assert out == pytest.approx(w[0] * ya + w[1] * ym, abs=1e-15)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 3), seeds)
def test_weighted_average_weights_and_convexity(T, d, B, seed):
    rng = np.random.default_rng(seed)
    p = _wa(d, rng, scale=3.0)
    a, m = rng.normal(scale=3, size=(B, T, d)), rng.normal(scale=3, size=(B, T, d))
    sink = []
    out = merge_weighted_average(Tensor(a), Tensor(m), p, weight_sink=sink).data
    w = sink[0]
    assert (w >= 0).all() and np.abs(w.sum(axis=-1) - 1).max() < 1e-12
    lo, hi = np.minimum(a, m), np.maximum(a, m)
    assert ((out >= lo - 1e-12) & (out <= hi + 1e-12)).all()


# -- branch dropout -------------------------------------------------------------

def test_branch_dropout_decisions():
    rng = np.random.default_rng(4)
    zero = _wa(2, rng, p=0.0)
    assert all(branch_dropout(zero, True, rng) == KEEP_BOTH for _ in range(1000))
    half = _wa(2, rng, p=0.5)
    assert all(branch_dropout(half, False, rng) == KEEP_BOTH for _ in range(1000))
    drops = sum(branch_dropout(half, True, rng) == DROP_ATTENTION for _ in range(10_000))
    assert abs(drops / 10_000 - 0.5) < 0.02


def test_branch_dropout_rate_bounds():
    with pytest.raises(ConfigError):
        branch_dropout(_wa(2, np.random.default_rng(0), p=1.0), True, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        EncoderConfig(merge="concat", branch_dropout_p=0.3)


def test_dropped_block_never_evaluates_attention():
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, K=3, merge="weighted_average", branch_dropout_p=0.999, dropout=0.2)
    p = init_block(np.random.default_rng(5), cfg)
    x = Tensor(np.random.default_rng(6).normal(size=(2, 5, 8)))
    sinks = Sinks.collecting()
    out = block_forward(x, p, training=True, rng=np.random.default_rng(7), sinks=sinks)
    assert sinks.attention_evals == 0 and sinks.attention_drops == 1 and not sinks.attention
    ref_rng = np.random.default_rng(7)
    assert ref_rng.random() < 0.999  # the decision draw
    ref = add(x, cgmlp_forward(x, p.cgmlp, True, ref_rng))
    assert np.array_equal(out.data, ref.data)


# -- blocks ------------------------------------------------------------------------

@pytest.mark.parametrize("merge", ["concat", "weighted_average"])
@pytest.mark.parametrize("attention", ["mhsa", "fastformer"])
def test_zeroed_branches_leave_residual(attention, merge):
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, K=3, attention=attention, merge=merge)
    p = init_block(np.random.default_rng(8), cfg)
    for name, t in named_parameters(p):
        if name.endswith(("norm.gamma", "norm.beta", "bias")):
            t.data[:] = 0.0
    x = Tensor(np.random.default_rng(9).normal(size=(5, 8)))
    out = block_forward(x, p)
    assert np.array_equal(out.data, x.data)
    assert out.shape == x.shape


def test_pinned_weights_give_attention_only_residual_block():
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, K=3, merge="weighted_average")
    p = init_block(np.random.default_rng(10), cfg)
    x = Tensor(np.random.default_rng(11).normal(size=(6, 8)))
    pinned = block_forward(x, p, force_weights=(1.0, 0.0))
    oracle = add(x, attention_branch_forward(x, p.attention))
    assert np.array_equal(pinned.data, oracle.data)


def test_transformer_block_shape():
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, block_type="transformer")
    params = init_encoder(cfg)
    assert encoder_forward(Tensor(np.ones((2, 31, 8))), cfg, params).shape == (2, 7, 8)


# -- encoder ---------------------------------------------------------------------

def test_encoder_without_blocks_is_subsample_plus_pe():
    cfg = EncoderConfig(N=0, d=8)
    params = init_encoder(cfg)
    x = Tensor(np.random.default_rng(12).normal(size=(19, 8)))
    h = conv_subsample(x, params.subsampler)
    expected = h.data + sinusoidal_pe(h.shape[0], 8).data
    assert np.array_equal(encoder_forward(x, cfg, params).data, expected)


@pytest.mark.parametrize("T", [7, 11, 31, 64])
def test_encoder_output_shape(T):
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, K=3)
    params = init_encoder(cfg)
    out = encoder_forward(Tensor(np.zeros((3, T, 8))), cfg, params)
    assert out.shape == (3, output_length(T), 8)


def test_encoder_training_mode_is_seeded():
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, K=3, merge="weighted_average", branch_dropout_p=0.5, dropout=0.3)
    params = init_encoder(cfg)
    x = Tensor(np.random.default_rng(13).normal(size=(2, 23, 8)))
    a = encoder_forward(x, cfg, params, training=True, rng=np.random.default_rng(1))
    b = encoder_forward(x, cfg, params, training=True, rng=np.random.default_rng(1))
    assert np.array_equal(a.data, b.data)


@given(seeds)
def test_encoder_weights_sum_to_one_every_block(seed):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(N=3, d=8, d_hidden=16, h=2, K=3, merge="weighted_average", seed=seed % 1000)
    params = init_encoder(cfg)
    sinks = Sinks.collecting(attention=False)
    encoder_forward(Tensor(rng.normal(scale=3, size=(2, 15, 8))), cfg, params, sinks=sinks)
    assert sorted(sinks.weights) == [0, 1, 2]
    for ws in sinks.weights.values():
        w = ws[0]
        assert (w >= 0).all() and np.abs(w.sum(axis=-1) - 1).max() < 1e-12


# -- pruning ------------------------------------------------------------------------

@pytest.mark.parametrize("attention", ["mhsa", "fastformer"])
def test_pruned_equals_forced_weights(attention):
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, K=3, attention=attention, merge="weighted_average")
    params = init_encoder(cfg)
    pruned = prune_to_cgmlp(params)
    x = Tensor(np.random.default_rng(14).normal(size=(2, 27, 8)))
    assert np.array_equal(
        encoder_forward(x, cfg, pruned).data,
        encoder_forward(x, cfg, params, force_weights=(0.0, 1.0)).data,
    )
    assert parameter_count(pruned) < parameter_count(params)
    assert all(b.attention is None and b.merge is None for b in pruned.blocks)


def test_prune_requires_weighted_average():
    with pytest.raises(ConfigError):
        prune_to_cgmlp(init_encoder(EncoderConfig(merge="concat")))


def test_pruned_block_shape():
    cfg = EncoderConfig(d=8, d_hidden=16, h=2, K=3, merge="weighted_average")
    block = prune_to_cgmlp(init_encoder(cfg)).blocks[0]
    assert isinstance(block, BlockParams)
    assert block_forward(Tensor(np.ones((4, 8))), block).shape == (4, 8)


# -- config ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "bad",
    [
        {"d": 7},
        {"h": 3},
        {"K": 4},
        {"d_hidden": 9},
        {"attention": "linear"},
        {"merge": "sum"},
        {"dropout": 1.0},
        {"branch_dropout_p": -0.1, "merge": "weighted_average"},
        {"N": -1},
        {"in_features": 5},
        {"block_type": "conformer"},
        {"N": 2.0},
    ],
)
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        EncoderConfig(**bad)


def test_config_round_trip_and_unknown_keys():
    cfg = EncoderConfig(N=3, attention="fastformer", merge="weighted_average", branch_dropout_p=0.2)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        EncoderConfig.from_dict({"N": 2, "width": 4})
