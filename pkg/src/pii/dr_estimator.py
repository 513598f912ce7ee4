"""Doubly robust direct-effect estimation with an estimated embedding.

Both estimators reduce to a no-intercept least-squares fit of a pseudo-outcome
on the covariate residual ``Rx = X - E[X | U]``:

* linear: the pseudo-outcome is ``Y - E[Y | U]``;
* nonlinear link ``g``: it is ``g'(mu)(Y - mu) + g(mu) - E[g(mu) | U]`` with
  ``mu = E[Y | X, U]``.

The per-outcome covariance is the sandwich ``Sigma^-1 Var_n(phi) Sigma^-1 / n``
where ``phi_i = Rx_i * (eta_i - b' Rx_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from pii.data_model import (
    Dataset, EmbeddingResult, FitResult, NumericalError, ValidationError,
)
from pii.nuisance import CrossFitPlan, LearnerSpec, derive_seeds, fit_predict_crossfit, make_plan

_COND_MAX = 1e12


@dataclass(frozen=True)
class LinkFunction:
    """A link ``g`` with derivative and the open domain of its argument."""

    tag: str
    g: object = field(repr=False, compare=False)
    g_prime: object = field(repr=False, compare=False)
    domain: tuple[float, float] = (-np.inf, np.inf)


def _logit_prime(mu):
    return 1.0 / (mu * (1.0 - mu))


LINKS = {
    "identity": LinkFunction("identity", lambda m: np.asarray(m, dtype=np.float64),
                             lambda m: np.ones_like(np.asarray(m, dtype=np.float64))),
    "logit": LinkFunction("logit", logit, _logit_prime, (0.0, 1.0)),
    "log": LinkFunction("log", np.log, lambda m: 1.0 / np.asarray(m, dtype=np.float64),
                        (0.0, np.inf)),
}


def get_link(tag: str | LinkFunction) -> LinkFunction:
    if isinstance(tag, LinkFunction):
        return tag
    try:
        return LINKS[tag]
    except KeyError:
        raise ValidationError(f"unknown link {tag!r}") from None


def inverse_link(tag: str):
    return {"identity": lambda z: z, "logit": expit, "log": np.exp}[tag]


@dataclass(frozen=True)
class DrOptions:
    """Nuisance learners and fitting options.

    ``crossfit`` fixes the fold plan explicitly; otherwise a plan with
    ``n_folds`` folds is drawn from ``seed``. ``mu_clip`` bounds the
    outcome-mean estimate away from the edge of the link's domain.
    """

    link: str = "identity"
    x_learner: LearnerSpec = LearnerSpec("ols")
    y_learner: LearnerSpec = LearnerSpec("ols")
    outer_learner: LearnerSpec = LearnerSpec("ols")
    n_folds: int = 5
    crossfit: CrossFitPlan | None = None
    mu_clip: float = 1e-6
    categorical_x: bool = False
    seed: int = 0

    def __post_init__(self):
        get_link(self.link)
        if not 0 < self.mu_clip < 0.5:
            raise ValidationError("mu_clip must lie in (0, 0.5)")
        if self.crossfit is None and self.n_folds < 1:
            raise ValidationError("n_folds must be >= 1")


@dataclass(frozen=True)
class FitInternals:
    """Residualized quantities kept for influence values and diagnostics."""

    rx: np.ndarray
    eta: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    tested_idx: tuple[int, ...]
    rows: np.ndarray
    plan: CrossFitPlan


def _role_spec(spec: LearnerSpec, role: int) -> LearnerSpec:
    # distinct nuisance roles draw from distinct streams
    return spec.with_seed(int(derive_seeds(spec.seed, 0x5EED, role, count=1)[0]))


def sandwich_fit(rx: np.ndarray, eta: np.ndarray):
    """No-intercept LS of each ``eta`` column on ``rx`` with sandwich covariance.

    Returns (beta d x m, cov m x d x d, sigma d x d).
    """
    n, d = rx.shape
    sigma = rx.T @ rx / n
    sigma = 0.5 * (sigma + sigma.T)
    if not np.linalg.cond(sigma) < _COND_MAX:
        raise NumericalError("singular Sigma: covariate residuals are collinear")
    cross = rx.T @ eta / n
    beta = np.linalg.solve(sigma, cross)
    e = eta - rx @ beta
    # phi_ij = rx_i * e_ij; centered 1/n empirical variance per outcome
    meat = np.einsum("ij,ik,il->jkl", e * e, rx, rx) / n
    mean_phi = (rx.T @ e / n).T
    meat -= mean_phi[:, :, None] * mean_phi[:, None, :]
    sinv = np.linalg.inv(sigma)
    cov = np.einsum("ab,jbc,cd->jad", sinv, meat, sinv) / n
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return beta, cov, sigma


def _assemble(ds: Dataset, beta_t, cov_t, sigma, n_used, flags, internals) -> FitResult:
    d, p = ds.d, ds.p
    tested = ds.tested_idx
    beta = np.zeros((d, p))
    tstat = np.full((d, p), np.nan)
    pval = np.full((d, p), np.nan)
    covs = [np.full((d, d), np.nan) for _ in range(p)]
    for k, j in enumerate(tested):
        beta[:, j] = beta_t[:, k]
        covs[j] = cov_t[k]
        se = np.sqrt(np.clip(np.diag(cov_t[k]), 0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = beta_t[:, k] / se
        tstat[:, j] = t
        pval[:, j] = np.clip(2.0 * norm.sf(np.abs(t)), 0.0, 1.0)
    return FitResult(beta, tuple(covs), sigma, tstat, pval, int(n_used), ds.control_idx,
                     ds.outcome_names, tuple(flags), internals)


def _prepare(ds: Dataset, u_hat: EmbeddingResult, opts: DrOptions):
    u = u_hat.u_hat
    if u.shape[0] != ds.n:
        raise ValidationError(f"embedding has {u.shape[0]} rows, dataset has {ds.n}")
    rows = u_hat.inference_rows
    x = ds.x[rows]
    y = ds.y_tested[rows]
    u = u[rows]
    n = rows.size
    plan = opts.crossfit if opts.crossfit is not None else make_plan(n, opts.n_folds, opts.seed)
    if plan.n != n:
        raise ValidationError(f"cross-fit plan covers {plan.n} rows, need {n}")
    if n <= ds.d + plan.n_folds:
        raise ValidationError(f"n={n} too small for d={ds.d} and {plan.n_folds} folds")
    flags = []
    if not plan.inferential:
        flags.append("no_split_non_inferential")
    if u_hat.fit_rows:
        flags.append("embedding_sample_split")
    return x, y, u, rows, plan, flags


def fit_linear(dataset: Dataset, u_hat: EmbeddingResult, opts: DrOptions) -> FitResult:
    """Cross-fitted double-residual estimate of the direct effect on every outcome.

    Parameters
    ----------
    dataset : Dataset
        Covariates, outcomes and the control set; control columns are not
        tested and report a zero effect.
    u_hat : EmbeddingResult
        Embedding used as the adjustment set. Rows used to fit a sample-split
        embedding map are excluded.
    opts : DrOptions
        Must use the identity link.

    Returns
    -------
    FitResult
        Effects ``b`` (d x p), sandwich covariances, Wald statistics and
        two-sided normal p-values.
    """
    if get_link(opts.link).tag != "identity":
        raise ValidationError("fit_linear needs the identity link; use fit_glink")
    x, y, u, rows, plan, flags = _prepare(dataset, u_hat, opts)
    ex = fit_predict_crossfit(u, x, _role_spec(opts.x_learner, 1), plan)
    ey = fit_predict_crossfit(u, y, _role_spec(opts.y_learner, 2), plan)
    rx = x - ex
    eta = y - ey
    beta, cov, sigma = sandwich_fit(rx, eta)
    internals = FitInternals(rx, eta, beta, sigma, dataset.tested_idx, rows, plan)
    return _assemble(dataset, beta, cov, sigma, rows.size, flags, internals)


def _clip_mu(mu: np.ndarray, link: LinkFunction, eps: float) -> tuple[np.ndarray, int]:
    lo, hi = link.domain
    if link.tag == "identity":
        return mu, 0
    upper = 1.0 - eps if np.isfinite(hi) else np.inf
    clipped = np.clip(mu, eps, upper)
    return clipped, int(np.count_nonzero(clipped != mu))


def fit_glink(dataset: Dataset, u_hat: EmbeddingResult, opts: DrOptions) -> FitResult:
    """Doubly robust effect estimate under a link ``g`` (identity, logit or log).

    Parameters
    ----------
    dataset : Dataset
        With ``opts.categorical_x`` the covariate block must be 0/1
        indicators of the non-baseline levels (at most one 1 per row).
    u_hat : EmbeddingResult
        Embedding used as the adjustment set.
    opts : DrOptions
        ``y_learner`` fits ``E[Y | X, U]``; ``outer_learner`` fits
        ``E[g(mu) | U]`` for continuous ``X``; ``x_learner`` fits
        ``E[X | U]`` (and the level propensities for categorical ``X``).

    Returns
    -------
    FitResult
    """
    link = get_link(opts.link)
    x, y, u, rows, plan, flags = _prepare(dataset, u_hat, opts)
    eps = opts.mu_clip
    n, d = x.shape
    xu = np.hstack([x, u])
    y_spec = _role_spec(opts.y_learner, 3)
    ex = fit_predict_crossfit(u, x, _role_spec(opts.x_learner, 1), plan)
    if opts.categorical_x:
        if not np.all((x == 0) | (x == 1)) or np.any(x.sum(axis=1) > 1):
            raise ValidationError("categorical_x needs 0/1 indicators of non-baseline levels")
        levels = [np.zeros(d)] + [np.eye(d)[k] for k in range(d)]
        alts = [np.hstack([np.tile(lv, (n, 1)), u]) for lv in levels]
        mu, mu_levels = fit_predict_crossfit(xu, y, y_spec, plan, alt_features=alts)
        pi = np.clip(ex, eps, 1 - eps)
        pi0 = np.clip(1.0 - pi.sum(axis=1, keepdims=True), eps, 1 - eps)
        pis = np.hstack([pi0, pi])
        pis /= pis.sum(axis=1, keepdims=True)
        gamma = np.zeros_like(y)
        n_clip = 0
        for k, m_k in enumerate(mu_levels):
            m_k, c = _clip_mu(m_k, link, eps)
            n_clip += c
            gamma += link.g(m_k) * pis[:, [k]]
        mu, c = _clip_mu(mu, link, eps)
        n_clip += c
    else:
        mu = fit_predict_crossfit(xu, y, y_spec, plan)
        mu, n_clip = _clip_mu(mu, link, eps)
        gamma = fit_predict_crossfit(u, link.g(mu), _role_spec(opts.outer_learner, 4), plan)
    if n_clip:
        flags.append(f"mu_clipped:{n_clip}")
    eta = link.g_prime(mu) * (y - mu) + link.g(mu) - gamma
    rx = x - ex
    beta, cov, sigma = sandwich_fit(rx, eta)
    internals = FitInternals(rx, eta, beta, sigma, dataset.tested_idx, rows, plan)
    return _assemble(dataset, beta, cov, sigma, rows.size, flags, internals)


def fit(dataset: Dataset, u_hat: EmbeddingResult, opts: DrOptions) -> FitResult:
    if get_link(opts.link).tag == "identity" and not opts.categorical_x:
        return fit_linear(dataset, u_hat, opts)
    return fit_glink(dataset, u_hat, opts)


def influence_values(result: FitResult, outcome: int | None = None) -> np.ndarray:
    """Per-observation influence values ``phi``.

    Returns an (n, d) array for one outcome column index, or (n, d, m) over
    all tested outcomes when ``outcome`` is None.
    """
    it = result.internals
    if not isinstance(it, FitInternals):
        raise ValidationError("fit result carries no internals")
    if outcome is None:
        e = it.eta - it.rx @ it.beta
        return it.rx[:, :, None] * e[:, None, :]
    if outcome not in it.tested_idx:
        raise ValidationError(f"outcome {outcome} was not tested")
    k = it.tested_idx.index(outcome)
    e = it.eta[:, k] - it.rx @ it.beta[:, k]
    return it.rx * e[:, None]


def directional_test(result: FitResult, v: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Wald statistics and p-values for ``v' b`` per outcome.

    The default direction is the first standard basis vector. Untested
    columns carry NaN.
    """
    d, p = result.beta_hat.shape
    v = np.eye(d)[0] if v is None else np.asarray(v, dtype=np.float64)
    if v.shape != (d,) or not np.any(v):
        raise ValidationError("direction must be a nonzero length-d vector")
    z = np.full(p, np.nan)
    for j in result.tested_idx:
        var = float(v @ result.cov_per_outcome[j] @ v)
        z[j] = float(v @ result.beta_hat[:, j]) / np.sqrt(var) if var > 0 else np.nan
    pv = np.where(np.isnan(z), np.nan, 2.0 * norm.sf(np.abs(z)))
    return z, pv


__all__ = ["DrOptions", "FitInternals", "LINKS", "LinkFunction", "directional_test", "fit",
           "fit_glink", "fit_linear", "get_link", "influence_values", "inverse_link",
           "sandwich_fit"]
