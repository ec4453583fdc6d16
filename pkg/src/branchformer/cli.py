"""Command-line entry point: train, gradcheck, bench, analyze, prune.

Failures print one JSON line to stderr, ``{"error": <code>, "message": ...}``,
and exit nonzero (1 for a failed check, 2 for anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import analysis
from .bench import encoder_factory, forward_time_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ToyTaskSpec, toy_dataset
from .encoder import EncoderConfig, init_encoder, prune_to_cgmlp
from .errors import BranchformerError, ConfigError
from .train import TrainConfig, grad_check, train

EXIT_FAILED_CHECK = 1
EXIT_ERROR = 2

# the toy size the finite-difference suite is specified at
GRADCHECK_TOY = dict(N=2, d=8, d_hidden=16, h=2, K=3)
# a size where the T^2 attention term dominates well before T=8192
BENCH_DEFAULT = dict(N=2, d=32, d_hidden=128, h=4, K=15, in_features=16, subsample_channels=8, merge="weighted_average")


class CheckFailed(Exception):
    code = "check_failed"


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _encoder_config(raw: dict) -> EncoderConfig:
    """Accept a bare encoder config or a training config carrying one."""
    return EncoderConfig.from_dict(raw["encoder"] if "encoder" in raw else raw)


def cmd_train(args: argparse.Namespace) -> None:
    config = TrainConfig.from_dict(_read_json(args.config))
    if args.out is not None:
        config = config.replace(out_dir=args.out)
    if args.steps is not None:
        config = config.replace(steps=args.steps)
    result = train(config)
    print(json.dumps({
        "out_dir": config.out_dir,
        "steps": result.steps_run,
        "final_eval_acc": result.final_accuracy,
        "checkpoint": str(result.checkpoint) if result.checkpoint else None,
    }))


def cmd_gradcheck(args: argparse.Namespace) -> None:
    base = _encoder_config(_read_json(args.config)) if args.config else EncoderConfig(**GRADCHECK_TOY)
    variants = [base]
    if args.all_variants:
        variants = [
            base.replace(attention=a, merge=m)
            for a in ("mhsa", "fastformer")
            for m in ("concat", "weighted_average")
        ]
    failed = []
    for i, cfg in enumerate(variants):
        report = grad_check(cfg, tolerance=args.tolerance, frames=args.frames, primitives=i == 0)
        print(f"# attention={cfg.attention} merge={cfg.merge}")
        for line in report.lines():
            print(line)
        failed += [f"{cfg.attention}/{cfg.merge}/{name}" for name in report.failures]
    if failed:
        raise CheckFailed(f"{len(failed)} gradient checks above tolerance, first {failed[0]}")


def _parse_grid(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--tgrid must be comma-separated integers, got {text!r}") from exc


def cmd_bench(args: argparse.Namespace) -> None:
    if args.config:
        cfg = _encoder_config(_read_json(args.config)).replace(attention=args.attention)
    else:
        cfg = EncoderConfig(**BENCH_DEFAULT, attention=args.attention)
    params = init_encoder(cfg)
    if args.pruned:
        params = prune_to_cgmlp(params)
    result = forward_time_benchmark(
        encoder_factory(cfg, params, batch=args.batch, seed=cfg.seed), _parse_grid(args.tgrid), reps=args.reps
    )
    result.write(args.out)
    print(json.dumps({"out": args.out, "slope": result.slope, "stderr": result.stderr}))


def cmd_analyze(args: argparse.Namespace) -> None:
    cfg, params = load_checkpoint(args.checkpoint)
    spec = ToyTaskSpec(vocab=cfg.in_features, length=args.length, noise=args.noise, seed=args.seed)
    batches = [feats for feats, _ in toy_dataset(spec, args.samples, 100, seed_offset=9)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    has_weights = not params.pruned and cfg.block_type == "branchformer" and cfg.merge == "weighted_average"
    if has_weights:
        analysis.write_branch_weights_csv(analysis.collect_branch_weights(cfg, params, batches), out / "branch_weights.csv")
        written.append("branch_weights.csv")
    if not params.pruned and cfg.attention == "mhsa":
        analysis.write_diagonality_csv(analysis.collect_diagonality(cfg, params, batches), out / "diagonality.csv")
        written.append("diagonality.csv")
    if not written:
        raise ConfigError("checkpoint has neither weighted-average merges nor self-attention maps")
    print(json.dumps({"out": str(out), "written": written}))


def cmd_prune(args: argparse.Namespace) -> None:
    cfg, params = load_checkpoint(args.checkpoint)
    pruned = prune_to_cgmlp(params)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, cfg, pruned)
    print(json.dumps({"out": args.out, "blocks": len(pruned.blocks)}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a synthetic task")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", help="override the run directory")
    p.add_argument("--steps", type=int, help="override the step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of primitives and encoder")
    p.add_argument("--config", help="encoder or training config JSON (default: the toy size)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--frames", type=int, default=6, help="sequence length after subsampling")
    p.add_argument("--all-variants", action="store_true", help="check both attention kinds and both merges")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward-time scaling in T")
    p.add_argument("--attention", choices=("mhsa", "fastformer"), default="mhsa")
    p.add_argument("--pruned", action="store_true", help="time the cgMLP-only model")
    p.add_argument("--tgrid", default="512,1024,2048,4096,8192")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--config", help="encoder config JSON (default: a bench-sized model)")
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="branch weights and diagonality of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--length", type=int, default=31)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("prune", help="drop attention branches from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CheckFailed as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILED_CHECK
    except (BranchformerError, OSError) as exc:
        code = getattr(exc, "code", "io")
        print(json.dumps({"error": code if isinstance(code, str) else "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
