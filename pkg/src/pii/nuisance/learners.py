"""Regression learners used for nuisance functions.

Every learner maps a training pair (features, targets) to predictions on new
feature rows, fitting each target column independently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from pii.data_model import ValidationError
from pii.nuisance.forest import fit_forests, resolve_m_try

KINDS = ("ols", "ridge", "knn", "random_forest", "zero", "mean")


@dataclass(frozen=True)
class LearnerSpec:
    """Learner kind plus its hyperparameters.

    ``kind`` is one of ``ols``, ``ridge`` (``lam``), ``knn`` (``k``) or
    ``random_forest`` (``n_trees``, ``max_depth``, ``max_samples``,
    ``m_try``, ``bootstrap``, ``min_leaf``). ``zero`` and ``mean`` are
    trivial baselines that ignore the features. ``seed`` fixes all internal
    randomness.
    """

    kind: str = "ols"
    lam: float = 0.0
    k: int = 10
    n_trees: int = 50
    max_depth: int | None = None
    max_samples: float = 1.0
    m_try: int | str = "third"
    bootstrap: bool = True
    min_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown learner kind {self.kind!r}")
        if not self.lam >= 0:
            raise ValidationError("ridge lam must be >= 0")
        if int(self.k) < 1:
            raise ValidationError("knn k must be >= 1")
        if int(self.n_trees) < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.max_depth is not None and int(self.max_depth) < 0:
            raise ValidationError("max_depth must be >= 0 or None")
        if not 0 < self.max_samples <= 1:
            raise ValidationError("max_samples must lie in (0, 1]")
        if int(self.min_leaf) < 1:
            raise ValidationError("min_leaf must be >= 1")
        if not (self.m_try in ("all", "third") or
                (isinstance(self.m_try, (int, np.integer)) and self.m_try >= 1)):
            raise ValidationError(f"invalid m_try {self.m_try!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    def with_seed(self, seed: int) -> "LearnerSpec":
        return replace(self, seed=int(seed) % 2**64)

    def label(self) -> str:
        if self.kind == "ridge":
            return f"ridge(lam={self.lam:g})"
        if self.kind == "knn":
            return f"knn(k={self.k})"
        if self.kind == "random_forest":
            return (f"rf(trees={self.n_trees},depth={self.max_depth},"
                    f"samples={self.max_samples:g},mtry={self.m_try})")
        return self.kind

    def min_train_rows(self) -> int:
        if self.kind == "knn":
            return max(2, int(self.k))
        if self.kind == "random_forest":
            return max(2, 2 * int(self.min_leaf))
        return 2


def derive_seeds(seed: int, *keys: int, count: int) -> np.ndarray:
    """``count`` unsigned 64-bit seeds derived from ``seed`` and ``keys``."""
    ss = np.random.SeedSequence([int(seed) % 2**64, *[int(k) for k in keys]])
    return ss.generate_state(count, dtype=np.uint64)


def _ridge_solve(F: np.ndarray, T: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Ridge with unpenalized intercept; returns (intercepts, coefficients)."""
    mu_f = F.mean(axis=0)
    mu_t = T.mean(axis=0)
    Fc = F - mu_f
    G = Fc.T @ Fc
    q = G.shape[0]
    if q == 0:
        return mu_t, np.zeros((0, T.shape[1]))
    rhs = Fc.T @ (T - mu_t)
    A = G + lam * np.eye(q)
    cond = np.linalg.cond(A) if lam == 0 else 0.0
    if lam == 0 and not cond < 1e12:
        # numerically singular Gram matrix: tiny ridge keeps folds alive
        A = G + (1e-10 * np.trace(G) / q + 1e-300) * np.eye(q)
    coef = np.linalg.solve(A, rhs)
    return mu_t - mu_f @ coef, coef


def _knn_predict(F: np.ndarray, T: np.ndarray, Fnew: np.ndarray, k: int) -> np.ndarray:
    k = min(k, F.shape[0])
    out = np.empty((Fnew.shape[0], T.shape[1]))
    sq = (F * F).sum(axis=1)
    block = 512
    for a in range(0, Fnew.shape[0], block):
        B = Fnew[a:a + block]
        d2 = (B * B).sum(axis=1)[:, None] - 2.0 * B @ F.T + sq[None, :]
        # stable sort: equal distances resolve to the lower training row
        idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[a:a + block] = T[idx].mean(axis=1)
    return out


def fit_predict(spec: LearnerSpec, features: np.ndarray, targets: np.ndarray,
                new_features: list[np.ndarray], *, stream: tuple[int, ...] = ()) -> list[np.ndarray]:
    """Fit on (features, targets) and predict on each matrix in ``new_features``.

    ``stream`` extends the learner seed so distinct folds draw independent
    randomness.
    """
    F = np.asarray(features, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    n = F.shape[0]
    if n < spec.min_train_rows():
        raise ValidationError(
            f"fold too small for {spec.label()}: {n} training rows")
    kind = spec.kind
    if kind == "zero":
        return [np.zeros((m.shape[0], T.shape[1])) for m in new_features]
    if kind == "mean":
        mu = T.mean(axis=0)
        return [np.tile(mu, (m.shape[0], 1)) for m in new_features]
    if kind in ("ols", "ridge"):
        lam = spec.lam if kind == "ridge" else 0.0
        icpt, coef = _ridge_solve(F, T, lam * n if kind == "ridge" else 0.0)
        return [icpt + np.asarray(m, dtype=np.float64) @ coef for m in new_features]
    if kind == "knn":
        return [_knn_predict(F, T, np.asarray(m, dtype=np.float64), int(spec.k))
                for m in new_features]
    seeds = derive_seeds(spec.seed, *stream, count=T.shape[1])
    model = fit_forests(F, T, seeds, n_trees=spec.n_trees, max_depth=spec.max_depth,
                        max_samples=spec.max_samples,
                        m_try=resolve_m_try(spec.m_try, F.shape[1]),
                        bootstrap=spec.bootstrap, min_leaf=spec.min_leaf)
    return [model.predict(m) for m in new_features]
