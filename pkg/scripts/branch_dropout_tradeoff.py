"""Unpruned vs cgMLP-only accuracy as a function of the branch-dropout rate."""
import argparse
import csv
from pathlib import Path

from branchformer.train import TrainConfig, pruned_accuracy, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "seqclass_reference.json"))
    ap.add_argument("--rates", default="0.0,0.2,0.4,0.6")
    ap.add_argument("--seeds", default="0", help="comma-separated encoder seeds")
    ap.add_argument("--attention", default="mhsa", choices=("mhsa", "fastformer"))
    ap.add_argument("--out", default="runs/branch_dropout.csv")
    args = ap.parse_args()

    base = TrainConfig.from_json(args.config)
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        for p in (float(r) for r in args.rates.split(",")):
            enc = base.encoder.replace(attention=args.attention, branch_dropout_p=p, seed=seed)
            result = train(base.replace(encoder=enc), write=False)
            full, pruned = pruned_accuracy(result, base.task)
            rows.append((seed, p, full, pruned))
            print(f"seed {seed} p={p:.1f}: unpruned {full:.3f}  cgMLP-only {pruned:.3f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "branch_dropout_p", "unpruned_acc", "pruned_acc"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
