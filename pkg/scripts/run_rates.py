"""Hold-out L2 error of the nuisance fits against sample size (true latent factors).

Forests are tuned per size by 3-fold grid selection; OLS runs on the
identity-link design, where it is correctly specified.

    python3 scripts/run_rates.py --reps 5
"""

from __future__ import annotations

import argparse

from pii.nuisance import LearnerSpec
from pii.simulation import SimConfig, nuisance_rate_study

FOREST_GRID = [LearnerSpec("random_forest", n_trees=50, max_depth=d, max_samples=s)
               for d in (1, 3, 5, 8, None) for s in (0.25, 0.5, 1.0)]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[400, 1600, 6400])
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()
    studies = [("forest", SimConfig(seed=20244), FOREST_GRID),
               ("ols", SimConfig(seed=20245, link="identity"), LearnerSpec("ols"))]
    for label, cfg, learner in studies:
        rows, slopes = nuisance_rate_study(args.sizes, cfg, learner, reps=args.reps,
                                           outcome_cols=(100, 101, 102))
        print(f"== {label} ({cfg.link} link)")
        for row in rows:
            print(f"  n={row.n:<6} {row.target}  rmse {row.rmse:.4f}")
        print("  log-log slopes: " + ", ".join(f"{t} {s:.3f}" for t, s in slopes.items()))


if __name__ == "__main__":
    main()
