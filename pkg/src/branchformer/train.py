"""Toy-scale training: loss, Adam with the Transformer warmup schedule,
the training loop and the gradient-check driver."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import ToyTaskSpec, generate_toy_batch, toy_dataset
from .encoder import EncoderConfig, EncoderParams, encoder_forward, init_encoder, prune_to_cgmlp
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .gradcheck import GradCheckReport, check_parameters, check_primitives
from .nn import linear, log_softmax_rows, named_parameters
from .tensor import Tensor, mean, mul_const, no_grad, reshape, scale, tensor_sum

log = logging.getLogger(__name__)


# -- loss ------------------------------------------------------------------------------

def label_smoothed_ce(logits: Tensor, targets: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Mean cross entropy against (1 - eps) one-hot + eps / C uniform targets."""
    C = logits.shape[-1]
    if C < 2:
        raise ContractError(f"need at least 2 classes, got {C}")
    targets = np.asarray(targets).reshape(-1)
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise ContractError(f"target out of range for {C} classes")
    flat = reshape(logits, (-1, C))
    if flat.shape[0] != targets.size:
        raise ShapeError(f"{flat.shape[0]} predictions but {targets.size} targets")
    q = np.full(flat.shape, smoothing / C)
    q[np.arange(targets.size), targets] += 1.0 - smoothing
    return scale(tensor_sum(mul_const(log_softmax_rows(flat), q)), -1.0 / targets.size)


# -- optimizer ---------------------------------------------------------------------------

@dataclass
class LrSchedule:
    base: float
    d: int
    warmup: int

    def __post_init__(self):
        if self.warmup < 1:
            raise ConfigError(f"warmup must be >= 1, got {self.warmup}")


def lr_at_step(s: int, sched: LrSchedule) -> float:
    """base * d^-0.5 * min(s^-0.5, s * warmup^-1.5); peaks at s = warmup."""
    if s < 1:
        raise ContractError(f"learning-rate step must be >= 1, got {s}")
    return sched.base * sched.d ** -0.5 * min(s ** -0.5, s * sched.warmup ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    weight_decay: float = 1e-6


def adam_step(params: Sequence[tuple[str, Tensor]], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam with decoupled weight decay, updating parameters in place."""
    for name, t in params:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if g.shape != t.data.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {t.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update += state.weight_decay * t.data
        t.data -= lr * update


# -- model head ---------------------------------------------------------------------------

def model_logits(
    features: Tensor,
    cfg: EncoderConfig,
    params: EncoderParams,
    task: str,
    training: bool = False,
    rng: np.random.Generator | None = None,
    sinks=None,
) -> Tensor:
    """Mean-pool + linear for seqclass, per-frame linear for symbolcopy."""
    h = encoder_forward(features, cfg, params, training, rng, sinks)
    if task == "seqclass":
        h = mean(h, axis=-2)
    return linear(h, params.head)


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float((logits.argmax(axis=-1) == targets).mean())


def evaluate(cfg: EncoderConfig, params: EncoderParams, spec: ToyTaskSpec, dataset) -> tuple[float, float]:
    """(accuracy, unsmoothed loss) over a list of (features, targets) batches."""
    correct = total = 0
    loss_sum = 0.0
    with no_grad():
        for feats, targets in dataset:
            logits = model_logits(Tensor(feats), cfg, params, spec.task)
            correct += int((logits.data.argmax(axis=-1) == targets).sum())
            total += targets.size
            loss_sum += float(label_smoothed_ce(logits, targets, 0.0).data) * targets.size
    return correct / total, loss_sum / total


# -- training loop -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    task: ToyTaskSpec = field(default_factory=ToyTaskSpec)
    steps: int = 3000
    batch_size: int = 32
    lr_base: float = 1.0
    warmup: int = 500
    label_smoothing: float = 0.1
    checkpoint_every: int = 0
    eval_every: int = 100
    eval_samples: int = 1000
    stop_at_accuracy: float | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.encoder.in_features != self.task.vocab:
            raise ConfigError(
                f"encoder in_features={self.encoder.in_features} must equal task vocab={self.task.vocab}"
            )
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_base, self.encoder.d, self.warmup)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        if "encoder" in raw:
            raw["encoder"] = EncoderConfig.from_dict(raw["encoder"])
        if "task" in raw:
            raw["task"] = ToyTaskSpec.from_dict(raw["task"])
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["encoder"] = self.encoder.to_dict()
        out["task"] = self.task.to_dict()
        return out

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainResult:
    cfg: EncoderConfig
    params: EncoderParams
    metrics: list[tuple[int, float, float, float]]
    evals: list[tuple[int, float, float]]
    checkpoint: Path | None
    steps_run: int

    @property
    def final_accuracy(self) -> float:
        return self.evals[-1][1] if self.evals else float("nan")

    def first_step_reaching(self, acc: float) -> int | None:
        return next((s for s, a, _ in self.evals if a >= acc), None)


def _checkpoint_path(out: Path, step: int) -> Path:
    return out / "checkpoints" / f"step_{step:06d}.ckpt"


def train(config: TrainConfig, write: bool = True) -> TrainResult:
    """Run the loop; writes config.json, metrics.csv, eval.csv and checkpoints under out_dir."""
    cfg, spec = config.encoder, config.task
    params = init_encoder(cfg, num_classes=spec.num_classes)
    named = list(named_parameters(params))
    state = AdamState()
    data_rng = np.random.default_rng([spec.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    eval_set = toy_dataset(spec, config.eval_samples, 250)
    sched = config.schedule

    out = Path(config.out_dir)
    last_ckpt: Path | None = None
    metrics_fh = evals_fh = None
    if write:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        last_ckpt = _checkpoint_path(out, 0)
        save_checkpoint(last_ckpt, cfg, params)
        metrics_fh = open(out / "metrics.csv", "w", newline="")
        evals_fh = open(out / "eval.csv", "w", newline="")
        metrics_w = csv.writer(metrics_fh)
        metrics_w.writerow(["step", "loss", "acc", "lr"])
        evals_w = csv.writer(evals_fh)
        evals_w.writerow(["step", "eval_acc", "eval_loss"])

    metrics: list[tuple[int, float, float, float]] = []
    evals: list[tuple[int, float, float]] = []
    step = 0
    try:
        for step in range(1, config.steps + 1):
            feats, targets = generate_toy_batch(spec, config.batch_size, data_rng)
            lr = lr_at_step(step, sched)
            for _, t in named:
                t.grad = None
            logits = model_logits(Tensor(feats), cfg, params, spec.task, training=True, rng=drop_rng)
            loss = label_smoothed_ce(logits, targets, config.label_smoothing)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingDiverged(f"loss became {loss_value} at step {step}; last checkpoint {last_ckpt}")
            loss.backward([t for _, t in named])
            adam_step(named, state, lr)
            row = (step, loss_value, accuracy(logits.data, targets), lr)
            metrics.append(row)
            if write:
                metrics_w.writerow([step, repr(row[1]), repr(row[2]), repr(lr)])
            if config.checkpoint_every and step % config.checkpoint_every == 0 and write:
                last_ckpt = _checkpoint_path(out, step)
                save_checkpoint(last_ckpt, cfg, params)
            if step % config.eval_every == 0 or step == config.steps:
                acc, eval_loss = evaluate(cfg, params, spec, eval_set)
                evals.append((step, acc, eval_loss))
                if write:
                    evals_w.writerow([step, repr(acc), repr(eval_loss)])
                log.info("step %d loss %.4f eval_acc %.4f lr %.2e", step, loss_value, acc, lr)
                if config.stop_at_accuracy is not None and acc >= config.stop_at_accuracy:
                    break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            evals_fh.close()
    if write and step > 0:
        last_ckpt = _checkpoint_path(out, step)
        save_checkpoint(last_ckpt, cfg, params)
    return TrainResult(cfg, params, metrics, evals, last_ckpt, step)


def pruned_accuracy(result: TrainResult, spec: ToyTaskSpec, samples: int = 1000) -> tuple[float, float]:
    """(two-branch accuracy, cgMLP-only accuracy) on a fresh evaluation set."""
    data = toy_dataset(spec, samples, 250, seed_offset=7)
    full, _ = evaluate(result.cfg, result.params, spec, data)
    pruned, _ = evaluate(result.cfg, prune_to_cgmlp(result.params), spec, data)
    return full, pruned


# -- gradient check driver --------------------------------------------------------------------

def grad_check(
    cfg: EncoderConfig,
    tolerance: float = 1e-4,
    frames: int = 6,
    batch: int = 2,
    seed: int = 0,
    primitives: bool = True,
) -> GradCheckReport:
    """Finite-difference check of every primitive and every encoder parameter.

    The scalar probed is sum(encoder(x) * R) for fixed random R, which keeps
    every parameter's gradient well above finite-difference rounding noise.
    Dropout is disabled; the input length is chosen so the encoder sees
    ``frames`` steps after subsampling.
    """
    cfg = cfg.replace(dropout=0.0, branch_dropout_p=0.0)
    rng = np.random.default_rng(seed)
    params = init_encoder(cfg, rng)
    T_in = 4 * frames + 3
    x = Tensor(rng.normal(size=(batch, T_in, cfg.in_features)))
    probe = rng.uniform(-1.0, 1.0, size=(batch, frames, cfg.d))

    def loss_fn() -> Tensor:
        return tensor_sum(mul_const(encoder_forward(x, cfg, params), probe))

    report = GradCheckReport(tolerance)
    if primitives:
        report.primitives = check_primitives(seed)
    report.parameters = check_parameters(loss_fn, list(named_parameters(params)))
    return report
