"""Run Monte Carlo studies from YAML configs and print their aggregates.

    python3 scripts/run_studies.py                      # every study below
    python3 scripts/run_studies.py type1 --reps 20      # a quick pilot

Reports go to results/<study>/report.{json,csv}.
"""

from __future__ import annotations

import argparse
import time
from dataclasses import replace
from pathlib import Path

import yaml

from pii.cli import build
from pii.simulation import SimConfig, run_experiment

ROOT = Path(__file__).resolve().parents[1]
STUDIES = ("type1", "misspec_clean", "misspec_contam20", "coverage")
SHOWN = ("type1", "power", "fdp", "coverage", "proj_gap", "max_mean_phi")


def load(name: str) -> SimConfig:
    raw = yaml.safe_load((ROOT / "scripts" / "configs" / f"{name}.yaml").read_text())
    return replace(build(SimConfig, raw["simulation"], name), seed=int(raw["seed"]))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("studies", nargs="*", default=list(STUDIES))
    ap.add_argument("--reps", type=int, default=None, help="override the replication count")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    for name in args.studies:
        cfg = load(name)
        if args.reps:
            cfg = replace(cfg, replications=args.reps)
        t0 = time.perf_counter()
        report = run_experiment(cfg, threads=args.threads)
        out = ROOT / "results" / name
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "report.json")
        report.write_csv(out / "report.csv")
        print(f"== {name}: {cfg.replications} reps, {time.perf_counter() - t0:.0f}s")
        for method in cfg.methods:
            cells = []
            for m in SHOWN:
                a = report.aggregates[method][m]
                if a["mean"] is not None:
                    cells.append(f"{m} {a['mean']:.4g} +- {a['se']:.2g}")
            print(f"  {method:<11} " + ", ".join(cells))


if __name__ == "__main__":
    main()
