"""Forward-time benchmarking and log-log slope fitting."""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .encoder import EncoderConfig, EncoderParams, encoder_forward
from .errors import BenchmarkError, ContractError
from .tensor import Tensor, no_grad

# the smallest timed region must span this many timer ticks
MIN_TICKS = 1000
MAX_INNER = 1 << 12


@dataclass
class BenchPoint:
    T: int
    median_s: float
    mean_s: float
    std_s: float
    reps: int


@dataclass
class BenchResult:
    points: list[BenchPoint] = field(default_factory=list)
    slope: float = float("nan")
    stderr: float = float("nan")

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "median_s", "mean_s", "std_s"])
            for p in self.points:
                w.writerow([p.T, repr(p.median_s), repr(p.mean_s), repr(p.std_s)])
        with open(out_dir / "fit.json", "w") as fh:
            json.dump({"slope": self.slope, "stderr": self.stderr}, fh, indent=2)


def loglog_slope_fit(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """OLS slope of ln(seconds) on ln(T), with its standard error."""
    if len(points) < 3:
        raise ContractError(f"slope fit needs >= 3 points, got {len(points)}")
    arr = np.asarray(points, dtype=np.float64)
    if (arr <= 0).any():
        raise ContractError("slope fit needs positive T and times")
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean())) / sxx
    resid = y - y.mean() - slope * xc
    dof = len(points) - 2
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return slope, stderr


def _time_once(run: Callable[[], object], inner: int) -> float:
    start = time.perf_counter()
    for _ in range(inner):
        run()
    return (time.perf_counter() - start) / inner


def forward_time_benchmark(
    factory: Callable[[int], Callable[[], object]],
    t_grid: Sequence[int],
    reps: int = 5,
    warmup: int = 2,
) -> BenchResult:
    """Time ``factory(T)()`` for each T; fit the slope of the per-T medians.

    ``factory(T)`` prepares inputs and returns a zero-argument callable that
    runs one forward pass. Timing is single-threaded.
    """
    grid = list(t_grid)
    if len(grid) < 4 or any(b <= a for a, b in zip(grid, grid[1:])) or grid[-1] < 8 * grid[0]:
        raise ContractError("T grid must be ascending, >= 4 points, spanning >= 8x")
    if reps < 5:
        raise ContractError(f"need >= 5 repetitions, got {reps}")
    tick = time.get_clock_info("perf_counter").resolution
    result = BenchResult()
    with threadpool_limits(limits=1):
        inner = 1
        for T in grid:
            run = factory(T)
            for _ in range(warmup):
                run()
            # widen the timed region until it dwarfs the timer resolution
            while _time_once(run, inner) * inner < MIN_TICKS * tick:
                inner *= 2
                if inner > MAX_INNER:
                    raise BenchmarkError(f"T={T}: forward too fast for timer resolution {tick:g}s")
            times = [_time_once(run, inner) for _ in range(reps)]
            result.points.append(
                BenchPoint(T, statistics.median(times), statistics.fmean(times), statistics.pstdev(times), reps)
            )
            inner = 1
    result.slope, result.stderr = loglog_slope_fit([(p.T, p.median_s) for p in result.points])
    return result


def spin(seconds: float) -> None:
    """Busy-wait; far more precise than sleep for synthetic timing controls."""
    deadline = time.perf_counter() + seconds
    while time.perf_counter() < deadline:
        pass


def encoder_factory(
    cfg: EncoderConfig, params: EncoderParams, batch: int = 8, seed: int = 0
) -> Callable[[int], Callable[[], object]]:
    """Benchmark factory running an inference forward over random (batch, T, F) features."""

    def make(T: int) -> Callable[[], object]:
        x = Tensor(np.random.default_rng([seed, T]).normal(size=(batch, T, cfg.in_features)))

        def run():
            with no_grad():
                return encoder_forward(x, cfg, params, training=False)

        return run

    return make


def result_to_dict(result: BenchResult) -> dict:
    return {"points": [asdict(p) for p in result.points], "slope": result.slope, "stderr": result.stderr}
