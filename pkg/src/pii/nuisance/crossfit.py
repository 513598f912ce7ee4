"""Fold plans, out-of-fold prediction and grid selection by K-fold CV."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pii.data_model import ValidationError
from pii.nuisance.learners import LearnerSpec, fit_predict


@dataclass(frozen=True)
class CrossFitPlan:
    """Partition of rows into folds.

    ``n_folds == 1`` is the no-split mode: nuisances are fit and evaluated on
    the same rows. It exists for algebraic checks and is not inferential.
    """

    n_folds: int
    fold_assignment: np.ndarray
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.fold_assignment, dtype=np.int64)
        if self.n_folds < 1:
            raise ValidationError("n_folds must be >= 1")
        if a.ndim != 1 or a.size == 0:
            raise ValidationError("fold_assignment must be a nonempty vector")
        if a.min() < 0 or a.max() >= self.n_folds:
            raise ValidationError("fold id out of range")
        if np.bincount(a, minlength=self.n_folds).min() == 0:
            raise ValidationError("every fold must be nonempty")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "fold_assignment", a)

    @property
    def n(self) -> int:
        return self.fold_assignment.size

    @property
    def inferential(self) -> bool:
        return self.n_folds >= 2

    def folds(self):
        """Yield (fold id, train rows, test rows)."""
        if self.n_folds == 1:
            rows = np.arange(self.n)
            yield 0, rows, rows
            return
        for k in range(self.n_folds):
            yield (k, np.flatnonzero(self.fold_assignment != k),
                   np.flatnonzero(self.fold_assignment == k))


def make_plan(n: int, n_folds: int = 5, seed: int = 0) -> CrossFitPlan:
    """Seeded random permutation cut into ``n_folds`` nearly equal blocks."""
    if n_folds > n:
        raise ValidationError(f"n_folds={n_folds} exceeds n={n}")
    if n_folds == 1:
        return CrossFitPlan(1, np.zeros(n, dtype=np.int64), seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xCF])))
    perm = rng.permutation(n)
    assign = np.empty(n, dtype=np.int64)
    for k, block in enumerate(np.array_split(perm, n_folds)):
        assign[block] = k
    return CrossFitPlan(n_folds, assign, int(seed))


def fit_predict_crossfit(features: np.ndarray, targets: np.ndarray, spec: LearnerSpec,
                         plan: CrossFitPlan,
                         alt_features: Sequence[np.ndarray] = ()) -> np.ndarray | tuple:
    """Out-of-fold predictions of ``targets`` from ``features``.

    Row i is predicted by a model trained only on rows outside its fold.
    When ``alt_features`` is given, the same fold models also predict at
    those alternative feature rows (same row count as ``features``) and a
    tuple ``(pred, [alt_pred, ...])`` is returned.
    """
    F = np.asarray(features, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64)
    squeeze = T.ndim == 1
    if squeeze:
        T = T[:, None]
    if F.ndim == 1:
        F = F[:, None]
    n = F.shape[0]
    if T.shape[0] != n or plan.n != n:
        raise ValidationError("features, targets and plan disagree on n")
    alts = [np.asarray(a, dtype=np.float64) for a in alt_features]
    pred = np.empty_like(T)
    alt_pred = [np.empty_like(T) for _ in alts]
    for k, tr, te in plan.folds():
        outs = fit_predict(spec, F[tr], T[tr], [F[te]] + [a[te] for a in alts],
                           stream=(k,))
        pred[te] = outs[0]
        for a, o in zip(alt_pred, outs[1:]):
            a[te] = o
    if squeeze:
        pred = pred[:, 0]
        alt_pred = [a[:, 0] for a in alt_pred]
    if alt_features:
        return pred, alt_pred
    return pred


@dataclass(frozen=True)
class GridResult:
    best: LearnerSpec
    scores: tuple[float, ...]
    failures: tuple[str, ...] = field(default=())


def grid_select(features: np.ndarray, targets: np.ndarray, grid: Sequence[LearnerSpec],
                plan: CrossFitPlan, *, return_scores: bool = False):
    """Pick the spec with the smallest cross-validated MSE.

    The MSE is averaged over target columns; ties go to the earlier grid
    entry. A failing cell is recorded and scored as infinite.
    """
    if not grid:
        raise ValidationError("grid must be nonempty")
    if not plan.inferential:
        raise ValidationError("grid selection needs at least two folds")
    T = np.asarray(targets, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    scores, failures = [], []
    for spec in grid:
        try:
            pred = fit_predict_crossfit(features, T, spec, plan)
            scores.append(float(np.mean((pred - T) ** 2)))
        except (ValidationError, np.linalg.LinAlgError) as exc:
            scores.append(np.inf)
            failures.append(f"{spec.label()}: {exc}")
    if not np.isfinite(scores).any():
        raise ValidationError("every grid cell failed: " + "; ".join(failures))
    best = grid[int(np.argmin(scores))]
    result = GridResult(best, tuple(scores), tuple(failures))
    return result if return_scores else best
