"""Benjamini-Hochberg step-up and power / type-I / FDP scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pii.data_model import FitResult, ValidationError


def bh_adjust(pvalues: np.ndarray, q: float) -> np.ndarray:
    """Benjamini-Hochberg step-up rejections at level ``q``.

    Rejects the ``k*`` smallest p-values, ``k* = max{k : p_(k) <= k q / m}``.
    Equality counts as rejection; ties are ordered by index (stable sort).

    Parameters
    ----------
    pvalues : ndarray
        Values in [0, 1]; untested entries must be removed beforehand.
    q : float
        Target false discovery rate.

    Returns
    -------
    ndarray of bool
    """
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    m = p.size
    out = np.zeros(m, dtype=bool)
    if m == 0:
        return out
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise ValidationError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    if below.any():
        k_star = int(np.flatnonzero(below)[-1]) + 1
        out[order[:k_star]] = True
    return out


@dataclass(frozen=True)
class Metrics:
    """NaN marks an undefined rate (no nulls, or no non-nulls)."""

    power: float
    type1: float
    fdp: float
    n_rejected_bh: int


def score_against_truth(rejected_raw: np.ndarray, rejected_bh: np.ndarray,
                        true_nonnull: np.ndarray) -> Metrics:
    """Power and type-I from raw rejections, FDP from BH rejections.

    FDP of an empty rejection set is 0.
    """
    raw = np.asarray(rejected_raw, dtype=bool)
    bh = np.asarray(rejected_bh, dtype=bool)
    truth = np.asarray(true_nonnull, dtype=bool)
    if not raw.shape == bh.shape == truth.shape:
        raise ValidationError("rejection vectors and truth must align")
    nulls = ~truth
    type1 = float(raw[nulls].mean()) if nulls.any() else float("nan")
    power = float(raw[truth].mean()) if truth.any() else float("nan")
    n_bh = int(bh.sum())
    fdp = float((bh & nulls).sum() / n_bh) if n_bh else 0.0
    return Metrics(power, type1, fdp, n_bh)


@dataclass(frozen=True)
class TestReport:
    """Raw and BH decisions over the tested outcomes of a fit."""

    alpha: float
    q_fdr: float
    tested_idx: tuple[int, ...]
    pvalues: np.ndarray
    rejected_raw: np.ndarray
    rejected_bh: np.ndarray
    metrics: Metrics | None = None

    __test__ = False  # not a pytest class

    def to_json_dict(self) -> dict:
        out = {
            "alpha": self.alpha,
            "q_fdr": self.q_fdr,
            "tested": list(self.tested_idx),
            "pvalue": [float(v) for v in self.pvalues],
            "rejected_raw": [bool(v) for v in self.rejected_raw],
            "rejected_bh": [bool(v) for v in self.rejected_bh],
            "metrics": None,
        }
        if self.metrics is not None:
            m = self.metrics
            out["metrics"] = {k: (None if isinstance(v, float) and np.isnan(v) else v)
                              for k, v in vars(m).items()}
        return out

    def write_csv(self, path: str | Path, names=None) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["outcome", "pvalue", "rejected_raw", "rejected_bh"])
            for k, j in enumerate(self.tested_idx):
                w.writerow([names[j] if names else j, repr(float(self.pvalues[k])),
                            int(self.rejected_raw[k]), int(self.rejected_bh[k])])


def test_outcomes(result: FitResult, alpha: float = 0.05, q_fdr: float = 0.05,
                  true_nonnull: np.ndarray | None = None, coordinate: int = 0) -> TestReport:
    """Raw level-``alpha`` and BH decisions for one covariate coordinate.

    ``true_nonnull`` (aligned with the tested outcomes) adds metrics.
    """
    if not (0 < alpha < 1 and 0 < q_fdr < 1):
        raise ValidationError("alpha and q_fdr must lie in (0, 1)")
    tested = result.tested_idx
    p = result.pvalues[coordinate, list(tested)]
    if np.any(np.isnan(p)):
        raise ValidationError("tested outcome with undefined p-value")
    raw = p < alpha
    bh = bh_adjust(p, q_fdr)
    metrics = None
    if true_nonnull is not None:
        metrics = score_against_truth(raw, bh, true_nonnull)
    return TestReport(alpha, q_fdr, tested, p, raw, bh, metrics)


test_outcomes.__test__ = False
