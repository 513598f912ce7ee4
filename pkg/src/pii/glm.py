"""Per-outcome GLM baselines sharing one design matrix."""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from scipy.stats import norm


def _batched_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve a[j] x = b[j]; rows whose system is singular come back NaN."""
    ok = np.linalg.cond(a) < 1e12
    x = np.full(b.shape, np.nan)
    if ok.any():
        x[ok] = np.linalg.solve(a[ok], b[ok][..., None])[..., 0]
    return x, ok


def logistic_irls(z: np.ndarray, y: np.ndarray, *, max_iter: int = 50, tol: float = 1e-8):
    """Logistic regression of every column of ``y`` on the design ``z``.

    Returns (coef k x m, model-based covariances m x k x k, converged mask).
    Non-converged or singular columns carry NaN.
    """
    n, k = z.shape
    m = y.shape[1]
    coef = np.zeros((m, k))
    active = np.ones(m, dtype=bool)
    converged = np.zeros(m, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        eta = z @ coef[idx].T
        mu = expit(eta)
        w = np.clip(mu * (1 - mu), 1e-12, None)
        info = np.einsum("ij,ik,il->jkl", w, z, z)
        score = (z.T @ (y[:, idx] - mu)).T
        step, ok = _batched_solve(info, score)
        coef[idx[~ok]] = np.nan
        active[idx[~ok]] = False
        good = idx[ok]
        coef[good] += step[ok]
        small = np.max(np.abs(step[ok]), axis=1) <= tol * (1 + np.max(np.abs(coef[good]), axis=1))
        converged[good[small]] = True
        active[good[small]] = False
    coef[~converged] = np.nan
    cov = np.full((m, k, k), np.nan)
    idx = np.flatnonzero(converged)
    if idx.size:
        mu = expit(z @ coef[idx].T)
        w = mu * (1 - mu)
        info = np.einsum("ij,ik,il->jkl", w, z, z)
        okc = np.linalg.cond(info) < 1e12
        cov[idx[okc]] = np.linalg.inv(info[okc])
        coef[idx[~okc]] = np.nan
        converged[idx[~okc]] = False
    return coef.T, cov, converged


def ols_homoskedastic(z: np.ndarray, y: np.ndarray):
    """OLS per column with classical covariance ``s^2 (Z'Z)^-1``."""
    n, k = z.shape
    coef, *_ = np.linalg.lstsq(z, y, rcond=None)
    resid = y - z @ coef
    s2 = (resid ** 2).sum(axis=0) / (n - k)
    zinv = np.linalg.inv(z.T @ z)
    cov = s2[:, None, None] * zinv[None]
    return coef, cov, np.ones(y.shape[1], dtype=bool)


def wald_first_slope(z: np.ndarray, y: np.ndarray, link: str):
    """Estimate, standard error and two-sided p-value of the coefficient on z[:, 1]."""
    if link == "logit":
        coef, cov, ok = logistic_irls(z, y)
    else:
        coef, cov, ok = ols_homoskedastic(z, y)
    est = coef[1]
    se = np.sqrt(cov[:, 1, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        t = est / se
    p = 2.0 * norm.sf(np.abs(t))
    return est, se, p, ok
