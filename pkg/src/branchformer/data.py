"""Synthetic sequence tasks for toy-scale training.

SeqClass: 4 classes = 2 * has_trigram + has_pair, where has_trigram asks
whether the contiguous motif (0, 1, 2) occurs anywhere (local context) and
has_pair whether symbol PAIR[0] sits at position 3 and PAIR[1] at position
T - 4 (global context). Those positions are the receptive-field centres of the
first and last subsampled frames, T - 7 >= T / 2 apart.

The pair is a conjunction rather than an equality test on purpose: equality
is parity-like, with no first-order correlation between any one input and the
label, and small models trained from scratch sit at chance on it.

SymbolCopy: per output frame, predict the input symbol at the centre of that
frame's subsampling receptive field (input position 4 t + 3).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError
from .nn import subsampled_length

TASKS = ("seqclass", "symbolcopy")
MOTIF = (0, 1, 2)
PAIR = (5, 6)
MIN_SEQCLASS_LENGTH = 14


@dataclass(frozen=True)
class ToyTaskSpec:
    task: str = "seqclass"
    vocab: int = 8
    length: int = 31
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.vocab < 7:
            raise ConfigError(f"vocab must be >= 7 (one-hot features feed the subsampler), got {self.vocab}")
        if subsampled_length(subsampled_length(self.length)) < 1:
            raise ConfigError(f"sequence length {self.length} below subsampler minimum 7")
        if self.task == "seqclass" and self.length < MIN_SEQCLASS_LENGTH:
            raise ConfigError(f"seqclass needs length >= {MIN_SEQCLASS_LENGTH} so the pair spans T/2, got {self.length}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")

    @property
    def num_classes(self) -> int:
        return 4 if self.task == "seqclass" else self.vocab

    @property
    def frames(self) -> int:
        return subsampled_length(subsampled_length(self.length))

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ToyTaskSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown task keys: {', '.join(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def seqclass_labels(symbols: np.ndarray) -> np.ndarray:
    """Vectorized labeler for (B, T) symbol arrays."""
    a, b, c = MOTIF
    motif = (symbols[:, :-2] == a) & (symbols[:, 1:-1] == b) & (symbols[:, 2:] == c)
    T = symbols.shape[1]
    pair = (symbols[:, 3] == PAIR[0]) & (symbols[:, T - 4] == PAIR[1])
    return 2 * motif.any(axis=1).astype(np.int64) + pair


def symbolcopy_targets(symbols: np.ndarray) -> np.ndarray:
    T = symbols.shape[1]
    frames = subsampled_length(subsampled_length(T))
    return symbols[:, 4 * np.arange(frames) + 3]


def sample_symbols(spec: ToyTaskSpec, batch: int, rng: np.random.Generator) -> np.ndarray:
    T, V = spec.length, spec.vocab
    symbols = rng.integers(0, V, size=(batch, T))
    if spec.task == "seqclass":
        # plant the motif in half the rows, clear of the pair positions
        plant = rng.random(batch) < 0.5
        starts = rng.integers(5, T - 7, size=batch)
        for r in np.flatnonzero(plant):
            symbols[r, starts[r]:starts[r] + 3] = MOTIF
        # half the rows hold the pair; the rest split over the three ways to miss it
        case = rng.integers(0, 6, size=batch)
        not_a = (PAIR[0] + rng.integers(1, V, size=batch)) % V
        not_b = (PAIR[1] + rng.integers(1, V, size=batch)) % V
        symbols[:, 3] = np.where(case <= 3, PAIR[0], not_a)
        symbols[:, T - 4] = np.where((case <= 2) | (case == 4), PAIR[1], not_b)
    return symbols


def featurize(symbols: np.ndarray, vocab: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    feats = np.eye(vocab)[symbols]
    if noise > 0:
        feats = feats + noise * rng.standard_normal(feats.shape)
    return feats


def generate_toy_batch(
    spec: ToyTaskSpec, batch: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """(features (B, T, vocab), targets); targets are (B,) or (B, T') class ids."""
    symbols = sample_symbols(spec, batch, rng)
    feats = featurize(symbols, spec.vocab, spec.noise, rng)
    if spec.task == "seqclass":
        return feats, seqclass_labels(symbols)
    return feats, symbolcopy_targets(symbols)


def toy_dataset(spec: ToyTaskSpec, samples: int, batch: int, seed_offset: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """A fixed list of batches drawn from a stream independent of the training one."""
    rng = np.random.default_rng([spec.seed, seed_offset])
    out = []
    left = samples
    while left > 0:
        n = min(batch, left)
        out.append(generate_toy_batch(spec, n, rng))
        left -= n
    return out
