"""Branch-weight profiles and attention diagonality."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .encoder import (
    ConcatMerge,
    EncoderConfig,
    EncoderParams,
    Sinks,
    TransformerBlockParams,
    encoder_forward,
)
from .errors import ConfigError, ContractError
from .tensor import Tensor, no_grad


def centrality(row: np.ndarray, i: int) -> float:
    """C_i = 1 - sum_j a_ij |i - j| / max_j |i - j|, with ``i`` 1-based."""
    row = np.asarray(row, dtype=np.float64)
    T = row.shape[0]
    if T < 2:
        raise ContractError("centrality needs T >= 2")
    if not 1 <= i <= T:
        raise ContractError(f"row index {i} outside 1..{T}")
    if abs(row.sum() - 1.0) > 1e-6 or (row < 0).any():
        raise ContractError(f"attention row is not a distribution (sum={row.sum():.6g})")
    disp = np.abs(np.arange(1, T + 1) - i)
    return float(1.0 - (row * disp).sum() / disp.max())


def diagonality(A: np.ndarray) -> float:
    """Mean row centrality of a (T, T) row-stochastic matrix."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"diagonality needs a square matrix, got {A.shape}")
    T = A.shape[0]
    if T < 2:
        raise ContractError("diagonality needs T >= 2")
    if np.abs(A.sum(axis=1) - 1.0).max() > 1e-6 or (A < 0).any():
        raise ContractError("attention rows are not distributions")
    idx = np.arange(T)
    disp = np.abs(idx[:, None] - idx[None, :])
    farthest = np.maximum(idx, T - 1 - idx)
    C = 1.0 - (A * disp).sum(axis=1) / farthest
    return float(C.mean())


@dataclass
class BranchWeightLog:
    mean_att: list[float] = field(default_factory=list)
    mean_mlp: list[float] = field(default_factory=list)
    std_att: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(i, a, m, s) for i, (a, m, s) in enumerate(zip(self.mean_att, self.mean_mlp, self.std_att))]


@dataclass
class DiagonalityReport:
    layers: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def _batches(dataset: Iterable) -> Iterable[Tensor]:
    for batch in dataset:
        yield batch if isinstance(batch, Tensor) else Tensor(batch)


def collect_branch_weights(cfg: EncoderConfig, params: EncoderParams, dataset: Iterable) -> BranchWeightLog:
    """Per-layer mean/std of (w_att, w_mlp) over every sample, inference mode."""
    if any(isinstance(b, TransformerBlockParams) or isinstance(b.merge, ConcatMerge) for b in params.blocks):
        raise ConfigError("branch weights exist only for weighted-average merging")
    per_layer: dict[int, list[np.ndarray]] = {}
    with no_grad():
        for x in _batches(dataset):
            sinks = Sinks.collecting(attention=False)
            encoder_forward(x, cfg, params, training=False, sinks=sinks)
            for layer, ws in sinks.weights.items():
                per_layer.setdefault(layer, []).extend(w.reshape(-1, 2) for w in ws)
    log = BranchWeightLog()
    for layer in sorted(per_layer):
        w = np.concatenate(per_layer[layer])
        log.mean_att.append(float(w[:, 0].mean()))
        log.mean_mlp.append(float(w[:, 1].mean()))
        log.std_att.append(float(w[:, 0].std()))
    return log


def collect_diagonality(cfg: EncoderConfig, params: EncoderParams, dataset: Iterable) -> DiagonalityReport:
    """Per-layer diagonality, averaged over samples then heads (unweighted)."""
    per_layer: dict[int, list[float]] = {}
    with no_grad():
        for x in _batches(dataset):
            sinks = Sinks.collecting(weights=False)
            encoder_forward(x, cfg, params, training=False, sinks=sinks)
            for layer, trace in sinks.attention.items():
                for head_maps in trace.maps:
                    maps = head_maps.reshape(-1, *head_maps.shape[-2:])
                    per_layer.setdefault(layer, []).extend(diagonality(m) for m in maps)
    if not per_layer:
        raise ConfigError("model has no self-attention maps to analyze")
    report = DiagonalityReport()
    for layer in sorted(per_layer):
        report.layers.append(layer)
        report.values.append(float(np.mean(per_layer[layer])))
    return report


def write_branch_weights_csv(log: BranchWeightLog, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "mean_w_att", "mean_w_mlp", "std"])
        for layer, a, m, s in log.rows():
            w.writerow([layer, repr(a), repr(m), repr(s)])


def write_diagonality_csv(report: DiagonalityReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "D"])
        for layer, value in zip(report.layers, report.values):
            w.writerow([layer, repr(value)])
