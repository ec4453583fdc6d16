"""Train the reference SeqClass config with both attention kinds and report when each reaches 99%."""
import argparse
import json
import logging
from pathlib import Path

from branchformer.train import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "seqclass_reference.json"))
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    base = TrainConfig.from_json(args.config)
    summary = {}
    for attention in ("mhsa", "fastformer"):
        cfg = base.replace(encoder=base.encoder.replace(attention=attention), out_dir=f"{args.out}/{attention}")
        result = train(cfg)
        summary[attention] = {
            "first_step_at_99": result.first_step_reaching(0.99),
            "final_eval_acc": result.final_accuracy,
            "checkpoint": str(result.checkpoint),
        }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
