"""Gradient-check pass rate over many seeds, with an extended-precision rerun
of every float64 miss to separate roundoff from real gradient errors.

    python scripts/gradcheck_sweep.py --seeds 20
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from gamma_core.cli import GRADCHECK_SHAPES  # noqa: E402
from gamma_core.dfn import gradcheck_dfn  # noqa: E402
from tests.test_dfn import longdouble_gradcheck  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    extended = np.finfo(np.longdouble).eps < np.finfo(np.float64).eps
    total = misses = cleared = 0
    for seed in range(args.seeds):
        for b, s, d in GRADCHECK_SHAPES:
            total += 1
            rep = gradcheck_dfn(b, s, d, seed=seed)
            if rep.passed:
                continue
            misses += 1
            line = f"seed {seed:3d} shape ({b},{s},{d}) float64 worst {rep.worst:.2e}"
            if extended:
                wide = longdouble_gradcheck(b, s, d, seed)
                cleared += wide.passed
                line += f"  longdouble worst {wide.worst:.2e}"
            print(line)
    print(f"{misses}/{total} float64 instances above 1e-5; {cleared} of them pass in extended precision")


if __name__ == "__main__":
    main()
