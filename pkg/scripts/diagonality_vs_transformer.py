"""Per-layer attention diagonality of a trained Branchformer vs a same-size Transformer control."""
import argparse
import dataclasses
from pathlib import Path

from branchformer.analysis import collect_branch_weights, collect_diagonality
from branchformer.data import toy_dataset
from branchformer.train import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "seqclass_reference.json"))
    ap.add_argument("--samples", type=int, default=200)
    args = ap.parse_args()

    base = TrainConfig.from_json(args.config)
    enc = base.encoder.replace(attention="mhsa")
    val = [x for x, _ in toy_dataset(dataclasses.replace(base.task, seed=100), args.samples, 100, seed_offset=9)]
    for block_type in ("branchformer", "transformer"):
        run = train(base.replace(encoder=enc.replace(block_type=block_type)), write=False)
        report = collect_diagonality(run.cfg, run.params, val)
        layers = "  ".join(f"L{i}={v:.3f}" for i, v in zip(report.layers, report.values))
        print(f"{block_type:12s} mean D {report.mean:.3f}  ({layers})  eval acc {run.final_accuracy:.3f}")
        if block_type == "branchformer" and enc.merge == "weighted_average":
            log = collect_branch_weights(run.cfg, run.params, val)
            print("             w_att per layer " + "  ".join(f"{a:.2f}" for a in log.mean_att))


if __name__ == "__main__":
    main()
