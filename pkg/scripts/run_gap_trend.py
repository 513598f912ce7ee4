"""Median projection gap of the PCA embedding against sample size.

Uses the logistic design with 1000 outcomes, 500 of them controls.

    python3 scripts/run_gap_trend.py --reps 20
"""

from __future__ import annotations

import argparse
from dataclasses import replace

import numpy as np

from pii.embedding import EmbedConfig, embed, projection_gap
from pii.simulation import SimConfig, gen_partial_linear


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[250, 500, 1000, 2000])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--source", choices=("all", "controls"), default="all")
    args = ap.parse_args()
    base = SimConfig(p=1000, n_controls=500, seed=20243)
    for n in args.sizes:
        gaps = []
        for rep in range(args.reps):
            ds, truth = gen_partial_linear(replace(base, n=n), rep)
            emb = embed(ds, EmbedConfig("pca", base.r), args.source)
            ones = np.ones((n, 1))
            gaps.append(projection_gap(np.hstack([ones, truth.u]), np.hstack([ones, emb.u_hat])))
        q = np.quantile(gaps, [0.25, 0.5, 0.75])
        print(f"n={n:<5} gap median {q[1]:.3f}  IQR [{q[0]:.3f}, {q[2]:.3f}]")


if __name__ == "__main__":
    main()
