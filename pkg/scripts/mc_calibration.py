"""How often does a 64-rollout pass-rate estimate land in the right class?

Prints the exact binomial probability of a correct verdict per true pass
rate, plus a simulated aggregate over questions whose rate is at least
``--gap`` away from the 0.25 and 1.0 thresholds.

    python scripts/mc_calibration.py --rollouts 64 --questions 1000
"""

import argparse
import math

import numpy as np

from gamma_core.curation import FixedRatePolicy, classify_pass, estimate_pass
from gamma_core.grpo import make_task


def exact_correct(p, n, lo=0.25):
    k_min = math.ceil(lo * n)
    kept = sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(k_min, n))
    if 0.25 <= p < 1.0:
        return kept
    return sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(0, k_min))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rollouts", type=int, default=64)
    ap.add_argument("--questions", type=int, default=1000)
    ap.add_argument("--gap", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    n = args.rollouts

    print("true p   P(correct verdict)")
    for p in [0.05, 0.1, 0.15, 0.2, 0.3, 0.35, 0.5, 0.8, 0.9, 0.95]:
        print(f"{p:6.2f}   {exact_correct(p, n):.4f}")

    rng = np.random.default_rng(args.seed)
    lo_hi = 0.25 - args.gap
    width = lo_hi + (1.0 - args.gap) - (0.25 + args.gap)
    correct = 0
    expected = 0.0
    for i in range(args.questions):
        u = rng.uniform(0, width)
        p = u if u <= lo_hi else u + 2 * args.gap
        est = estimate_pass(make_task(rng, f"mc-{i}"), FixedRatePolicy(p), n, seed=args.seed)
        truth = "kept" if 0.25 <= p < 1.0 else "too-hard"
        correct += classify_pass(est.exact_rate) == truth
        expected += exact_correct(p, n)
    print(f"simulated: {correct / args.questions:.3f} correct; binomial expectation {expected / args.questions:.3f}")


if __name__ == "__main__":
    main()
