"""Pick the forest nuisance spec by K-fold CV on pilot replications.

Searches max_depth x max_samples x n_trees on the desk-scale logistic
design, separately for E[X | U] and E[Y | X, U] (a subset of tested
outcomes), and prints the CV-MSE table plus the winners as JSON.

    python3 scripts/tune_forest.py --reps 10 --trees 50 --out scripts/configs/tuned_forest.json
"""

from __future__ import annotations

import argparse
import itertools
import json
from pathlib import Path

import numpy as np

from pii.nuisance import LearnerSpec, grid_select, make_plan
from pii.simulation import SimConfig, gen_partial_linear

DEPTHS = ("1", "3", "5", "8", "12", "none")
SAMPLES = (0.25, 0.5, 0.75, 1.0)
TREES = (10, 25, 50)


def grid(depths, samples, trees) -> list[LearnerSpec]:
    return [LearnerSpec("random_forest", n_trees=t, max_depth=None if d == "none" else int(d),
                        max_samples=s)
            for d, s, t in itertools.product(depths, samples, trees)]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--n-outcomes", type=int, default=10, help="tested outcomes used for Y")
    ap.add_argument("--folds", type=int, default=2, help="match the folds of the runs")
    ap.add_argument("--depths", nargs="+", default=list(DEPTHS), help="integers or 'none'")
    ap.add_argument("--samples", type=float, nargs="+", default=list(SAMPLES))
    ap.add_argument("--trees", type=int, nargs="+", default=list(TREES))
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    cfg = SimConfig()
    cells = grid(args.depths, args.samples, args.trees)
    totals = {"x": np.zeros(len(cells)), "y": np.zeros(len(cells))}
    for rep in range(args.reps):
        ds, truth = gen_partial_linear(cfg, 10_000 + rep)  # pilot streams, disjoint from runs
        u = truth.u
        cols = list(ds.tested_idx)[: args.n_outcomes]
        plan = make_plan(ds.n, args.folds, seed=rep)
        for target, feats, resp in (("x", u, ds.x), ("y", np.hstack([ds.x, u]), ds.y[:, cols])):
            res = grid_select(feats, resp, cells, plan, return_scores=True)
            totals[target] += np.asarray(res.scores)
    chosen = {}
    for target, tot in totals.items():
        mean = tot / args.reps
        order = np.argsort(mean, kind="stable")
        print(f"\nE[{target.upper()} | ...] CV-MSE, best five:")
        for i in order[:5]:
            print(f"  {cells[i].label():45s} {mean[i]:.6f}")
        best = cells[int(order[0])]
        chosen[target] = {"kind": "random_forest", "n_trees": best.n_trees,
                          "max_depth": best.max_depth, "max_samples": best.max_samples}
    text = json.dumps(chosen, indent=1, sort_keys=True)
    print("\n" + text)
    if args.out:
        args.out.write_text(text + "\n")


if __name__ == "__main__":
    main()
