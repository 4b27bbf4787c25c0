"""Overfit the reduced model on a 64-frame phantom set and score a held-out set.

    python scripts/overfit_run.py --out runs/overfit [--epochs 30] [--lr 1e-3]
"""
import argparse
import os

import numpy as np
import torch

from deepcap.metrics import format_summary
from deepcap.model import REDUCED_CONFIG, build_model, save_checkpoint
from deepcap.synth import generate_dataset
from deepcap.training import TrainConfig, evaluate, train, write_metrics_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--precision", choices=("float32", "float64"), default="float32")
    ap.add_argument("--augment", action="store_true", help="augment training samples")
    args = ap.parse_args()
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)

    train_set = [pb.to_pullback() for pb in generate_dataset(64, seed=1)]
    held_out = [pb.to_pullback() for pb in generate_dataset(16, seed=2)]
    model = build_model(REDUCED_CONFIG, args.seed)
    cfg = TrainConfig(batch=8, epochs=args.epochs, seed=args.seed, variant="ALL", peak_lr=args.lr,
                      patience=args.epochs, precision=args.precision,
                      augment=args.augment)
    model, report = train(model, train_set, held_out, cfg, log=lambda s: print(s, flush=True))
    report.write_csv(os.path.join(args.out, "train_report.csv"))
    save_checkpoint(model, os.path.join(args.out, "model.dcap"), {"variant": "ALL", "seed": args.seed})

    losses = np.array([e.train_loss for e in report.epochs])
    avg = np.convolve(losses, np.ones(5) / 5, mode="valid")
    for name, data in (("train", train_set), ("held_out", held_out)):
        records, summary = evaluate(model, data, 10.0)
        write_metrics_csv(os.path.join(args.out, f"{name}_metrics.csv"), records)
        print(format_summary(summary, f"{name}: {len(records)} images"))
    print(f"5-epoch loss average monotone: {bool(np.all(np.diff(avg) < 0))}")
    print(f"wall clock {report.wall_clock_s / 60:.1f} min")


if __name__ == "__main__":
    main()
