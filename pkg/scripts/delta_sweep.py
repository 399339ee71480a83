"""Final value and detection recall of NPG and FPG across attack magnitudes.

Writes one sweep CSV per algorithm under --out (default results/sweep).
"""

import argparse
from dataclasses import replace
from pathlib import Path

from robustpg import harness

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--deltas", type=float, nargs="+", default=[1, 3, 10, 30, 100])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/sweep")
    args = ap.parse_args()
    for algo in ("npg", "fpg"):
        cfg = harness.load_config(ROOT / "configs" / f"gridworld_flip_{algo}.cfg")
        cfg = replace(cfg, seeds=tuple(args.seeds), output_dir=args.out)
        rows = harness.sweep_delta(cfg, args.deltas, workers=args.workers)
        for row in rows:
            print(algo, f"delta={row['delta']:g}", f"value={row['final_value_mean']:.4f}", f"recall={row['detection_recall_mean']:.3f}")


if __name__ == "__main__":
    main()
