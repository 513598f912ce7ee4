"""Deterministic error bounds and algebraic identities, evaluated exactly."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import spearmanr

from pii.data_model import Dataset, NumericalError, ValidationError
from pii.embedding import projection_gap
from pii.simulation import gen_linear_gaussian


def _with_intercept(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    return np.column_stack([np.ones(u.shape[0]), u])


def _residualize(design: np.ndarray, m: np.ndarray) -> np.ndarray:
    q, rr = np.linalg.qr(design)
    if np.min(np.abs(np.diag(rr))) <= 1e-12 * np.max(np.abs(np.diag(rr))):
        raise ValidationError("rank-deficient design")
    return m - q @ (q.T @ m)


def _double_residual(x: np.ndarray, y: np.ndarray, design: np.ndarray):
    rx = _residualize(design, x)
    ry = _residualize(design, y)
    n = x.shape[0]
    s = rx.T @ rx / n
    if not np.linalg.cond(s) < 1e12:
        raise ValidationError("residual covariance of X is singular")
    return np.linalg.solve(s, rx.T @ ry / n), s, rx, ry


@dataclass(frozen=True)
class BiasBoundReport:
    s_norm: float
    kappa_s: float
    proj_gap: float
    gamma_inf: float
    b_colmax: float
    bound: float
    actual: float
    applicable: bool
    bound_corrected: float = float("inf")
    applicable_corrected: bool = False

    def to_json_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v)
                for k, v in asdict(self).items()}


def bias_bound_linear(dataset: Dataset, u_true: np.ndarray, u_est: np.ndarray) -> BiasBoundReport:
    """Deterministic bound on the effect shift caused by substituting an embedding.

    With linear nuisances (projections onto ``[1, U]`` and ``[1, U_hat]``),
    ``max_j |b~_j - b_j|`` is bounded by
    ``(|b|_{2,inf} + |S|^{-1/2} |Gamma|_inf) k g / (1 - k g)`` where
    ``k = cond(S)``, ``g`` is the projector gap and
    ``Gamma = diag(Y'Y / n)``. Outcomes in the control set are excluded.

    Parameters
    ----------
    dataset : Dataset
    u_true, u_est : ndarray
        True and substituted embeddings (column counts may differ).

    Returns
    -------
    BiasBoundReport
        ``applicable`` is False when ``k g >= 1``; the bound is then inf.

    Notes
    -----
    The bound above assumes ``|X'X/n| = |S|``, which fails when X is
    strongly collinear with U; small-scale outcomes then expose violations.
    ``bound_corrected`` repeats the backward-error argument without that
    step. With ``G = Xc'Xc/n`` (centered X), ``rho = |G|/|S|`` and
    ``t = k rho g`` it equals
    ``(|b|_{2,inf} + |G|^{-1/2} max_j (|Yc_j|^2/n)^{1/2}) t / (1 - t)``,
    applicable when ``t < 1``.
    """
    x = dataset.x
    y = dataset.y_tested
    d_true = _with_intercept(u_true)
    d_est = _with_intercept(u_est)
    b, s, _, _ = _double_residual(x, y, d_true)
    bt, _, _, _ = _double_residual(x, y, d_est)
    sv = np.linalg.svd(s, compute_uv=False)
    s_norm = float(sv[0])
    kappa = float(sv[0] / sv[-1])
    gap = projection_gap(d_true, d_est)
    n = x.shape[0]
    gamma_inf = float(np.max(np.sum(dataset.y ** 2, axis=0) / n))
    b_colmax = float(np.max(np.linalg.norm(b, axis=0)))
    actual = float(np.max(np.linalg.norm(bt - b, axis=0)))
    kg = kappa * gap
    applicable = kg < 1
    bound = ((b_colmax + gamma_inf / np.sqrt(s_norm)) * kg / (1 - kg)) if applicable else float("inf")
    # both projectors annihilate constants, so centering loses nothing
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    g_norm = float(np.linalg.norm(xc.T @ xc / n, 2))
    t = kappa * (g_norm / s_norm) * gap
    applicable_c = t < 1
    gamma_c = float(np.max(np.sum(yc ** 2, axis=0) / n))
    bound_c = ((b_colmax + np.sqrt(gamma_c / g_norm)) * t / (1 - t)) if applicable_c else float("inf")
    return BiasBoundReport(s_norm, kappa, gap, gamma_inf, b_colmax, float(bound), actual,
                           bool(applicable), float(bound_c), bool(applicable_c))


@dataclass(frozen=True)
class BackwardErrorReport:
    bound_abs: float | None
    bound_rel: float | None
    actual_abs: float
    applicable: bool


def backward_error_bound(a: np.ndarray, delta_a: np.ndarray, b_vec: np.ndarray,
                         delta_b: np.ndarray) -> BackwardErrorReport:
    """Perturbation bound for the solution of ``a x = b`` (spectral norms).

    ``bound_abs = (|x| k |dA|/|A| + k |db|/|A|) / (1 - k |dA|/|A|)`` with
    ``k = cond(A)``. The relative bound uses ``|db|/|b|`` and is None when
    ``b = 0``. Bounds are None (inapplicable) unless ``k |dA|/|A| < 1``.
    """
    a = np.asarray(a, dtype=np.float64)
    da = np.asarray(delta_a, dtype=np.float64)
    b = np.asarray(b_vec, dtype=np.float64)
    db = np.asarray(delta_b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("a must be square")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] <= 1e-15 * sv[0]:
        raise ValidationError("a is singular")
    a_norm = float(sv[0])
    kappa = float(sv[0] / sv[-1])
    x = np.linalg.solve(a, b)
    rel_a = np.linalg.norm(da, 2) / a_norm
    applicable = kappa * rel_a < 1
    if not applicable:
        return BackwardErrorReport(None, None, float("nan"), False)
    x_hat = np.linalg.solve(a + da, b + db)
    actual = float(np.linalg.norm(x_hat - x))
    denom = 1 - kappa * rel_a
    bound_abs = (np.linalg.norm(x) * kappa * rel_a + kappa * np.linalg.norm(db) / a_norm) / denom
    bnorm = np.linalg.norm(b)
    bound_rel = kappa * (rel_a + np.linalg.norm(db) / bnorm) / denom if bnorm > 0 else None
    return BackwardErrorReport(float(bound_abs), None if bound_rel is None else float(bound_rel),
                               actual, True)


@dataclass(frozen=True)
class FwlReport:
    coef_gap: float
    hc0_gap: float
    sigma2_one: np.ndarray
    sigma2_two: np.ndarray
    dof_rel_gap: float

    def to_json_dict(self) -> dict:
        return {"coef_gap": self.coef_gap, "hc0_gap": self.hc0_gap,
                "dof_rel_gap": self.dof_rel_gap,
                "sigma2_one": self.sigma2_one.tolist(), "sigma2_two": self.sigma2_two.tolist()}


def fwl_check(dataset: Dataset, u: np.ndarray) -> FwlReport:
    """Compare the joint regression on ``[1, X, U]`` with the double-residual fit.

    Reports the largest coefficient and HC0-covariance discrepancies over
    all outcomes, and the relative gap in
    ``(n - k - d) s2_one = (n - k) s2_two`` with ``k`` the width of ``[1, U]``
    (both sides equal the residual sum of squares).

    Parameters
    ----------
    dataset : Dataset
    u : ndarray
        Adjustment matrix; ``[1, X, U]`` must have full column rank.

    Returns
    -------
    FwlReport
    """
    x, y = dataset.x, dataset.y
    n, d = x.shape
    nuis = _with_intercept(u)
    k = nuis.shape[1]
    z = np.column_stack([x, nuis])
    if np.linalg.matrix_rank(z) < z.shape[1]:
        raise ValidationError("rank-deficient [1, X, U]")
    # one step: joint least squares through the normal equations
    g_inv = np.linalg.inv(z.T @ z)
    coef = g_inv @ z.T @ y
    e1 = y - z @ coef
    # two steps: residualize both sides on [1, U]
    b2, _, rx, ry = _double_residual(x, y, nuis)
    e2 = ry - rx @ b2
    rxx_inv = np.linalg.inv(rx.T @ rx)
    coef_gap = float(np.max(np.abs(coef[:d] - b2)))
    hc0_gap = 0.0
    for j in range(y.shape[1]):
        meat1 = (z * (e1[:, [j]] ** 2)).T @ z
        v1 = (g_inv @ meat1 @ g_inv)[:d, :d]
        meat2 = (rx * (e2[:, [j]] ** 2)).T @ rx
        v2 = rxx_inv @ meat2 @ rxx_inv
        hc0_gap = max(hc0_gap, float(np.max(np.abs(v1 - v2))))
    s2_one = (e1 ** 2).sum(axis=0) / (n - k - d)
    s2_two = (e2 ** 2).sum(axis=0) / (n - k)
    lhs, rhs = (n - k - d) * s2_one, (n - k) * s2_two
    dof_rel = float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300)))
    return FwlReport(coef_gap, hc0_gap, s2_one, s2_two, dof_rel)


@dataclass(frozen=True)
class TrendReport:
    levels: tuple[float, ...]
    proj_gap: tuple[float, ...]
    bias: tuple[float, ...]
    spearman: float

    def to_json_dict(self) -> dict:
        return asdict(self)


def bias_trend(seeds, noise_levels, *, n: int = 200, d: int = 1, r: int = 3, p: int = 20,
               coupling: float = 1.0) -> TrendReport:
    """Median projection gap and median max-column bias per embedding noise level.

    Each replication perturbs the true embedding by Gaussian noise of the
    given scale and measures ``max_j |b~_j - b_j|`` under linear nuisances.
    The Spearman correlation between the two medians summarizes the trend.
    """
    gaps, biases = [], []
    for level in noise_levels:
        g_l, b_l = [], []
        for seed in seeds:
            x, u, y, _ = gen_linear_gaussian(seed, n, d, r, p, coupling=coupling)
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence([int(seed), 0x7E, int(round(level * 1e6))])))
            u_est = u + level * rng.standard_normal(u.shape)
            b, *_ = _double_residual(x, y, _with_intercept(u))
            bt, *_ = _double_residual(x, y, _with_intercept(u_est))
            g_l.append(projection_gap(_with_intercept(u), _with_intercept(u_est)))
            b_l.append(float(np.max(np.linalg.norm(bt - b, axis=0))))
        gaps.append(float(np.median(g_l)))
        biases.append(float(np.median(b_l)))
    rho = float(spearmanr(gaps, biases).statistic) if len(gaps) > 1 else float("nan")
    return TrendReport(tuple(float(v) for v in noise_levels), tuple(gaps), tuple(biases), rho)


__all__ = ["BackwardErrorReport", "BiasBoundReport", "FwlReport", "TrendReport",
           "backward_error_bound", "bias_bound_linear", "bias_trend", "fwl_check",
           "NumericalError"]
