"""Overfit the default classifier on 40 synthetic sequences and score a held-out set."""

import argparse
import json

from skelconv.experiments import OverfitConfig, run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--metrics", help="write per-epoch metrics as jsonl")
    args = ap.parse_args()
    r = run_overfit(OverfitConfig(epochs=args.epochs, learning_rate=args.lr, model_seed=args.seed))
    print(f"train_acc {r['train_acc']:.3f}  heldout_acc {r['heldout_acc']:.3f}  "
          f"epochs {r['epochs']}  {r['seconds']:.0f}s")
    if args.metrics:
        with open(args.metrics, "w") as fh:
            fh.writelines(json.dumps(m) + "\n" for m in r["metrics"])


if __name__ == "__main__":
    main()
