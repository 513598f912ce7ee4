"""Latent embeddings estimated from control outcomes.

Two recipes are provided: principal components of the (preprocessed)
control block, and principal components of its residual after projecting
off ``[1, X]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pii.data_model import (
    Dataset, EmbeddingResult, NumericalError, ValidationError, dumps_json,
    read_matrix_csv, write_matrix_csv,
)

STEPS = ("library_size_normalize", "log1p", "center", "scale")


def _parse_step(step) -> tuple[str, float | None]:
    if isinstance(step, str):
        name, _, arg = step.partition(":")
        param = float(arg) if arg else None
    elif isinstance(step, dict) and len(step) == 1:
        (name, param), = step.items()
    else:
        name, param = step
    if name not in STEPS:
        raise ValidationError(f"unknown preprocessing step {name!r}")
    if name == "library_size_normalize":
        param = 1e4 if param is None else float(param)
        if not param > 0:
            raise ValidationError("target_total must be positive")
    elif param is not None:
        raise ValidationError(f"step {name!r} takes no parameter")
    return name, param


@dataclass(frozen=True)
class EmbedConfig:
    """Embedding recipe.

    ``preprocessing`` is an ordered sequence of steps; each is a name or a
    ``(name, param)`` pair, where only ``library_size_normalize`` takes a
    parameter (the target row total, default 1e4). ``split_fraction`` is
    the share of rows used to fit the embedding map; 0 fits and applies on
    all rows.
    """

    method: str = "pca"
    rank: int = 1
    preprocessing: tuple = ()
    split_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("pca", "ruv"):
            raise ValidationError(f"unknown embedding method {self.method!r}")
        if int(self.rank) < 1:
            raise ValidationError("rank must be >= 1")
        if not 0 <= self.split_fraction < 1:
            raise ValidationError("split_fraction must lie in [0, 1)")
        object.__setattr__(self, "preprocessing",
                           tuple(_parse_step(s) for s in self.preprocessing))


def preprocess(block: np.ndarray, steps, row_totals: np.ndarray | None = None) -> np.ndarray:
    """Apply preprocessing steps in order. ``row_totals`` defaults to row sums."""
    m = np.array(block, dtype=np.float64)
    for name, param in steps:
        if name == "library_size_normalize":
            tot = m.sum(axis=1) if row_totals is None else np.asarray(row_totals, float)
            if np.any(tot <= 0):
                raise ValidationError("library_size_normalize needs positive row totals")
            m = m * (param / tot)[:, None]
        elif name == "log1p":
            if np.any(m <= -1):
                raise ValidationError("log1p needs entries > -1")
            m = np.log1p(m)
        elif name == "center":
            m = m - m.mean(axis=0)
        elif name == "scale":
            sd = m.std(axis=0, ddof=1)
            m = m / np.where(sd > 0, sd, 1.0)
    return m


def _sign_fix(u: np.ndarray, v: np.ndarray) -> None:
    """Make each loading column's largest-magnitude entry nonnegative."""
    for k in range(v.shape[1]):
        i = int(np.argmax(np.abs(v[:, k])))  # first index wins ties
        if v[i, k] < 0:
            v[:, k] *= -1.0
            u[:, k] *= -1.0


def _split_rows(n: int, cfg: EmbedConfig) -> np.ndarray | None:
    if cfg.split_fraction == 0:
        return None
    n_fit = int(np.ceil(cfg.split_fraction * n))
    if not 1 <= n_fit < n:
        raise ValidationError(f"split_fraction {cfg.split_fraction} leaves an empty side")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(cfg.seed), 0xE3])))
    return np.sort(rng.permutation(n)[:n_fit])


def _pc_scores(m_fit: np.ndarray, m_all: np.ndarray, rank: int, scale_ref: float):
    centre = m_fit.mean(axis=0)
    a = m_fit - centre
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * max(scale_ref, 1e-300):
        raise ValidationError("zero matrix after preprocessing")
    v = vt[:rank].T.copy()
    u = u[:, :rank].copy()
    _sign_fix(u, v)
    scores = (m_all - centre) @ v
    return scores, v, s


def _control_block(dataset: Dataset, source: str = "controls") -> tuple[np.ndarray, np.ndarray]:
    if source == "all":
        return dataset.y, dataset.y.sum(axis=1)
    if source != "controls":
        raise ValidationError(f"unknown embedding source {source!r}")
    if not dataset.control_idx:
        raise ValidationError("embedding needs a nonempty control set")
    return dataset.y_controls, dataset.y.sum(axis=1)


def pca_embed(dataset: Dataset, cfg: EmbedConfig, source: str = "controls") -> EmbeddingResult:
    """Principal-component scores of the preprocessed, centered control block.

    Scores are left singular vectors times singular values; loadings are the
    right singular vectors, with each loading column's largest-magnitude
    entry made nonnegative.

    Parameters
    ----------
    dataset : Dataset
        Source of the control block ``y[:, control_idx]``.
    cfg : EmbedConfig
        ``method`` must be ``"pca"``.
    source : {"controls", "all"}
        Use the control block (default) or every outcome column.

    Returns
    -------
    EmbeddingResult
    """
    if cfg.method != "pca":
        raise ValidationError("pca_embed needs method='pca'")
    yc, totals = _control_block(dataset, source)
    n, c = yc.shape
    if cfg.rank > min(n, c):
        raise ValidationError(f"rank {cfg.rank} exceeds min(n, |C|) = {min(n, c)}")
    m = preprocess(yc, cfg.preprocessing, totals)
    fit_rows = _split_rows(n, cfg)
    m_fit = m if fit_rows is None else m[fit_rows]
    if cfg.rank > min(m_fit.shape):
        raise ValidationError(f"rank {cfg.rank} exceeds the fitting block's dimensions")
    scores, v, s = _pc_scores(m_fit, m, cfg.rank, float(np.abs(m).max()))
    return EmbeddingResult(scores, v, "pca", cfg.preprocessing,
                           None if fit_rows is None else tuple(int(i) for i in fit_rows), s)


def ruv_embed(dataset: Dataset, cfg: EmbedConfig, source: str = "controls") -> EmbeddingResult:
    """Principal-component scores of the control block residualized on ``[1, X]``.

    Parameters
    ----------
    dataset : Dataset
        Covariates and control block.
    cfg : EmbedConfig
        ``method`` must be ``"ruv"``.
    source : {"controls", "all"}
        Use the control block (default) or every outcome column.

    Returns
    -------
    EmbeddingResult
    """
    if cfg.method != "ruv":
        raise ValidationError("ruv_embed needs method='ruv'")
    yc, totals = _control_block(dataset, source)
    n, c = yc.shape
    d = dataset.d
    if cfg.rank > min(n - d - 1, c):
        raise ValidationError(f"rank {cfg.rank} exceeds min(n-d-1, |C|) = {min(n - d - 1, c)}")
    m = preprocess(yc, cfg.preprocessing, totals)
    fit_rows = _split_rows(n, cfg)
    design = np.column_stack([np.ones(n), dataset.x])
    d_fit = design if fit_rows is None else design[fit_rows]
    m_fit = m if fit_rows is None else m[fit_rows]
    if np.linalg.matrix_rank(d_fit) < d + 1:
        raise ValidationError("rank-deficient X: [1, X] lacks full column rank")
    coef, *_ = np.linalg.lstsq(d_fit, m_fit, rcond=None)
    resid_fit = m_fit - d_fit @ coef
    resid_all = m - design @ coef
    scores, v, s = _pc_scores(resid_fit, resid_all, cfg.rank, float(np.abs(m).max()))
    return EmbeddingResult(scores, v, "ruv", cfg.preprocessing,
                           None if fit_rows is None else tuple(int(i) for i in fit_rows), s)


def embed(dataset: Dataset, cfg: EmbedConfig, source: str = "controls") -> EmbeddingResult:
    if cfg.method == "pca":
        return pca_embed(dataset, cfg, source)
    return ruv_embed(dataset, cfg, source)


def _orthobasis(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[-1] <= 1e-12 * s[0]:
        raise ValidationError("rank-deficient input to projection_gap")
    return u


def projection_gap(u_true: np.ndarray, u_est: np.ndarray) -> float:
    """Operator norm of the difference of the projectors off two column spaces.

    With orthonormal bases Q1, Q2 the norm equals
    ``max(|(I - Q1 Q1')Q2|, |(I - Q2 Q2')Q1|)``; the residual form keeps
    full relative accuracy for nearly equal subspaces and never forms an
    n-by-n projector.

    Parameters
    ----------
    u_true, u_est : ndarray
        Full-column-rank matrices with the same number of rows.

    Returns
    -------
    float
        A value in [0, 1].
    """
    q1 = _orthobasis(u_true)
    q2 = _orthobasis(u_est)
    if q1.shape[0] != q2.shape[0]:
        raise ValidationError("row counts differ")
    a = np.linalg.norm(q2 - q1 @ (q1.T @ q2), 2)
    b = np.linalg.norm(q1 - q2 @ (q2.T @ q1), 2)
    return min(max(float(a), float(b), 0.0), 1.0)


def save_embedding(result: EmbeddingResult, csv_path: str | Path) -> Path:
    """Write scores as CSV and a JSON sidecar next to it; returns the sidecar path."""
    csv_path = Path(csv_path)
    write_matrix_csv(csv_path, result.u_hat, [f"u{k}" for k in range(result.rank)])
    side = csv_path.with_suffix(".json")
    meta = {
        "method": result.method,
        "rank": result.rank,
        "preprocessing": [[nm, p] for nm, p in result.preprocessing],
        "fit_rows": list(result.fit_rows) if result.fit_rows else None,
        "loadings": result.loadings.tolist() if result.loadings is not None else None,
        "singular_values": (result.singular_values.tolist()
                            if result.singular_values is not None else None),
    }
    side.write_text(dumps_json(meta))
    return side


def load_embedding(csv_path: str | Path) -> EmbeddingResult:
    csv_path = Path(csv_path)
    u, _ = read_matrix_csv(csv_path)
    side = csv_path.with_suffix(".json")
    if not side.exists():
        return EmbeddingResult(u, None, "external")
    meta = json.loads(side.read_text())
    load = meta.get("loadings")
    sv = meta.get("singular_values")
    fr = meta.get("fit_rows")
    return EmbeddingResult(u, None if load is None else np.asarray(load), meta["method"],
                           tuple((nm, p) for nm, p in meta.get("preprocessing", [])),
                           tuple(fr) if fr else None,
                           None if sv is None else np.asarray(sv))


__all__ = ["EmbedConfig", "embed", "load_embedding", "pca_embed", "preprocess",
           "projection_gap", "ruv_embed", "save_embedding", "NumericalError"]
