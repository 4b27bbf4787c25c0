"""Per-image CPU latency of one set of weights at two input sides.

    python scripts/bench_scaling.py [--config deepcap-reduced] [--sides 128 256] [--batch 48]
"""
import argparse
from dataclasses import replace

from deepcap.cli import bench_inference
from deepcap.model import DeepCap, build_model, config_from_arg


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="deepcap-reduced")
    ap.add_argument("--sides", type=int, nargs="+", default=[128, 256])
    ap.add_argument("--batch", type=int, default=48)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    base = build_model(config_from_arg(args.config), args.seed)
    per_image = {}
    for side in args.sides:
        model = DeepCap(replace(base.config, input_side=side))
        model.load_state_dict(base.state_dict())
        report, _ = bench_inference(model, args.batch, args.reps, 1, args.threads, args.seed)
        per_image[side] = report.ms_per_image
        print(report.summary_text())
    lo, hi = min(args.sides), max(args.sides)
    print(f"ratio {hi}px / {lo}px = {per_image[hi] / per_image[lo]:.2f}")


if __name__ == "__main__":
    main()
