"""Effect shift of the double-residual fit as the embedding error grows.

    python3 scripts/run_bias_trend.py --seeds 50
"""

from __future__ import annotations

import argparse

from pii.diagnostics import bias_trend

LEVELS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=50)
    args = ap.parse_args()
    rep = bias_trend(range(args.seeds), LEVELS)
    for lv, gap, bias in zip(rep.levels, rep.proj_gap, rep.bias):
        print(f"noise {lv:<5} gap {gap:.4f}  bias {bias:.4f}")
    print(f"Spearman(gap, bias) = {rep.spearman:.3f}")


if __name__ == "__main__":
    main()
