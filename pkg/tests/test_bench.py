import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from branchformer.bench import (
    BenchPoint,
    BenchResult,
    encoder_factory,
    forward_time_benchmark,
    loglog_slope_fit,
    spin,
)
from branchformer.cli import BENCH_DEFAULT
from branchformer.encoder import EncoderConfig, init_encoder, prune_to_cgmlp
from branchformer.errors import ContractError


def test_slope_fit_examples():
    slope, _ = loglog_slope_fit([(T, 3e-4 * T) for T in (512, 1024, 2048, 4096)])
    assert slope == pytest.approx(1.0, abs=1e-9)
    slope, _ = loglog_slope_fit([(T, 2e-9 * T * T) for T in (512, 1024, 2048, 4096)])
    assert slope == pytest.approx(2.0, abs=1e-9)
    slope, stderr = loglog_slope_fit([(2, 4), (4, 16), (8, 64)])
    assert slope == pytest.approx(2.0, abs=1e-12) and stderr == pytest.approx(0.0, abs=1e-12)


@given(st.floats(-3, 3), st.floats(1e-9, 1e3))
def test_slope_fit_recovers_power_laws(k, c):
    pts = [(T, c * T ** k) for T in (16, 64, 256, 1024)]
    assert loglog_slope_fit(pts)[0] == pytest.approx(k, abs=1e-9)


def test_slope_fit_errors():
    with pytest.raises(ContractError):
        loglog_slope_fit([(1, 1), (2, 2)])
    with pytest.raises(ContractError):
        loglog_slope_fit([(1, 1), (2, 0), (4, 4)])


def test_grid_and_reps_validation():
    noop = lambda T: (lambda: None)  # noqa: E731
    for grid in ([16, 32, 64], [64, 32, 128, 512], [16, 32, 64, 100]):
        with pytest.raises(ContractError):
            forward_time_benchmark(noop, grid)
    with pytest.raises(ContractError):
        forward_time_benchmark(noop, [16, 32, 64, 128], reps=4)


@pytest.mark.parametrize("power,c", [(1, 1e-5), (2, 1e-6)])
def test_synthetic_spin_controls(power, c):
    result = forward_time_benchmark(lambda T: (lambda: spin(c * T ** power)), [16, 32, 64, 128], reps=5)
    assert result.slope == pytest.approx(power, abs=0.02), [p.median_s for p in result.points]
    assert all(p.reps == 5 and p.std_s >= 0 for p in result.points)


def test_result_files(tmp_path):
    r = BenchResult([BenchPoint(T, 0.1 * T, 0.1 * T, 0.0, 5) for T in (1, 2, 4)], slope=1.0, stderr=0.0)
    r.write(tmp_path)
    assert (tmp_path / "bench.csv").read_text().splitlines()[0] == "T,median_s,mean_s,std_s"
    assert json.loads((tmp_path / "fit.json").read_text()) == {"slope": 1.0, "stderr": 0.0}


def test_encoder_factory_runs_without_tape():
    cfg = EncoderConfig(N=1, d=8, d_hidden=16, h=2, K=3)
    out = encoder_factory(cfg, init_encoder(cfg), batch=2)(31)()
    assert out.shape == (2, 7, 8) and out.node is None and not out.requires_grad


@pytest.mark.slow
@pytest.mark.parametrize("attention,pruned", [("fastformer", False), ("mhsa", True)])
def test_linear_variants_scale_linearly(attention, pruned):
    cfg = EncoderConfig(**BENCH_DEFAULT, attention=attention)
    params = init_encoder(cfg)
    if pruned:
        params = prune_to_cgmlp(params)
    result = forward_time_benchmark(encoder_factory(cfg, params), [256, 512, 1024, 2048, 4096])
    assert abs(result.slope - 1.0) <= 0.25, result.slope
    assert math.isfinite(result.stderr)
