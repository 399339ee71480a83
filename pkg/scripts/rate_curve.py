"""SEVER parameter error against the contamination level.

Prints the Sigma-weighted squared error of SEVER averaged over seeds for each
epsilon and the log-log slope, for several outlier multipliers.  Small
multipliers give outliers that are hard to separate from clean points; large
ones are removed outright and leave only the statistical floor.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from test_acceptance import RATE_EPS, _outlier_problem  # noqa: E402

from robustpg.regression import sever  # noqa: E402
from robustpg.rng import stream  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mults", type=float, nargs="+", default=[-1, -3, -10, -100])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--offset", type=int, default=0)
    args = ap.parse_args()
    seeds = range(args.offset, args.offset + args.seeds)
    for mult in args.mults:
        means = []
        for eps in RATE_EPS:
            errs = []
            for s in seeds:
                p, w_star = _outlier_problem(s, frac=eps, mult=mult)
                diff = sever(p, rng=stream(s, "solver")).w - w_star
                errs.append(diff @ (p.xs.T @ p.xs / p.n) @ diff)
            means.append(np.mean(errs))
        slope = np.polyfit(np.log(RATE_EPS), np.log(means), 1)[0]
        print(f"mult={mult:g} slope={slope:.3f} errors={np.array2string(np.array(means), precision=2)}")


if __name__ == "__main__":
    main()
