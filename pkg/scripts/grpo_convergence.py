"""Toy GRPO convergence across seeds and learning rates.

    python scripts/grpo_convergence.py --seeds 0 1 2 3 --steps 500
"""

import argparse
import json
import time

import numpy as np

from gamma_core.grpo import TOY_LR, PolicyConfig, train_toy, trailing_mean


def first_crossing(curve, key="mean_accuracy", level=0.9, window=25):
    vals = [r[key] for r in curve]
    for t in range(window - 1, len(vals)):
        if np.mean(vals[t - window + 1 : t + 1]) >= level:
            return t
    return None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--lrs", type=float, nargs="+", default=[1e-6, 0.1, TOY_LR])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--curve-out", help="write the per-step records of every run here (JSONL)")
    args = ap.parse_args()

    rows = []
    print(f"{'lr':>8} {'seed':>4} {'start':>6} {'cross@':>7} {'acc':>6} {'fmt':>6} {'kl':>7} {'sec':>5}")
    for lr in args.lrs:
        for seed in args.seeds:
            t0 = time.perf_counter()
            res = train_toy(PolicyConfig(lr=lr), args.steps, seed)
            sec = time.perf_counter() - t0
            cross = first_crossing(res.curve)
            acc = trailing_mean(res.curve, "mean_accuracy")
            fmt = trailing_mean(res.curve, "mean_format")
            kl = trailing_mean(res.curve, "mean_kl")
            print(f"{lr:>8g} {seed:>4} {res.curve[0]['mean_accuracy']:>6.3f} {str(cross):>7} {acc:>6.3f} {fmt:>6.3f} {kl:>7.4f} {sec:>5.2f}")
            rows.extend({"lr": lr, "seed": seed, **r} for r in res.curve)
    if args.curve_out:
        with open(args.curve_out, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
