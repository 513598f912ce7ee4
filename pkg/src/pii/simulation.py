"""Monte Carlo experiments on generalized partial linear models.

Data: X ~ N(0, 1), U = X alpha + eps, linear predictor Z = X beta + U eta,
and Y ~ Bernoulli(expit(Z)) (logit) or Y = Z + N(0, 1) (identity). Every
variable is drawn from its own counter-based stream keyed by
(seed, replication, role), so any one of them can be regenerated alone.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import linregress, norm

from pii.data_model import Dataset, NumericalError, ValidationError, dumps_json, external_embedding
from pii.dr_estimator import DrOptions, fit, influence_values
from pii.embedding import EmbedConfig, embed, projection_gap
from pii.glm import wald_first_slope
from pii.multiple_testing import test_outcomes
from pii.nuisance import LearnerSpec, fit_predict, grid_select, make_plan

METHODS = ("glm_naive", "glm_oracle", "pii_true_u", "pii_est_u")
METRICS = ("type1", "power", "fdp", "n_rejected_bh", "coverage", "max_mean_phi", "proj_gap")

ROLE = {"x": 1, "alpha": 2, "eps": 3, "beta": 4, "eta": 5, "y": 6, "misspec": 7,
        "fit": 8, "test_u": 9}


def stream(seed: int, rep: int, role: str) -> np.random.Generator:
    """Independent generator for one (seed, replication, role) triple."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(seed), int(rep), ROLE[role]])))


@dataclass(frozen=True)
class SimConfig:
    """Full parameterization of a Monte Carlo experiment."""

    n: int = 1000
    p: int = 200
    r: int = 10
    n_controls: int = 100
    sigma_eps: float = 1.0
    nonnull_prob: float = 0.2
    effect_size: float = 2.0
    link: str = "logit"
    contamination: float = 0.0
    control_selection: str = "oracle"
    methods: tuple[str, ...] = ("pii_true_u",)
    embed: EmbedConfig = EmbedConfig("pca", 10)
    embed_source: str = "all"
    learners: DrOptions | None = None
    replications: int = 200
    seed: int = 0
    alpha: float = 0.05
    q_fdr: float = 0.05

    def __post_init__(self):
        if min(self.n, self.p, self.r, self.replications) < 1:
            raise ValidationError("n, p, r and replications must be positive")
        if not 0 <= self.n_controls < self.p:
            raise ValidationError("n_controls must lie in [0, p)")
        if not self.sigma_eps > 0:
            raise ValidationError("sigma_eps must be positive")
        if not 0 <= self.nonnull_prob <= 1:
            raise ValidationError("nonnull_prob must lie in [0, 1]")
        if not 0 <= self.contamination <= 1:
            raise ValidationError("contamination must lie in [0, 1]")
        if self.link not in ("logit", "identity"):
            raise ValidationError(f"unknown link {self.link!r}")
        if self.control_selection not in ("oracle", "least_variable"):
            raise ValidationError(f"unknown control_selection {self.control_selection!r}")
        if self.embed_source not in ("controls", "all"):
            raise ValidationError(f"unknown embed_source {self.embed_source!r}")
        methods = tuple(self.methods)
        if not methods or any(m not in METHODS for m in methods):
            raise ValidationError(f"methods must be a nonempty subset of {METHODS}")
        object.__setattr__(self, "methods", methods)
        if self.learners is None:
            object.__setattr__(self, "learners", DrOptions(link=self.link))
        if self.learners.link != self.link:
            raise ValidationError("learners.link must match the simulation link")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["embed"]["preprocessing"] = [list(s) for s in self.embed.preprocessing]
        d["learners"].pop("crossfit", None)
        return d


@dataclass(frozen=True)
class Truth:
    u: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    nonnull: np.ndarray
    true_controls: tuple[int, ...]


def gen_partial_linear(cfg: SimConfig, rep: int) -> tuple[Dataset, Truth]:
    """One replication of the partial linear design.

    The first ``n_controls`` columns are the true controls (zero effect).
    """
    n, p, r = cfg.n, cfg.p, cfg.r
    x = stream(cfg.seed, rep, "x").standard_normal((n, 1))
    alpha = stream(cfg.seed, rep, "alpha").uniform(-1, 1, (1, r))
    eps = stream(cfg.seed, rep, "eps").normal(0, cfg.sigma_eps, (n, r))
    u = x @ alpha + eps
    rng_b = stream(cfg.seed, rep, "beta")
    nonnull = rng_b.random(p) < cfg.nonnull_prob
    nonnull[: cfg.n_controls] = False
    beta = (cfg.effect_size * nonnull)[None, :].astype(np.float64)
    eta = stream(cfg.seed, rep, "eta").uniform(-1, 1, (r, p)) / math.sqrt(r)
    z = x @ beta + u @ eta
    rng_y = stream(cfg.seed, rep, "y")
    if cfg.link == "logit":
        y = (rng_y.random((n, p)) < expit(z)).astype(np.float64)
    else:
        y = z + rng_y.standard_normal((n, p))
    controls = tuple(range(cfg.n_controls))
    ds = Dataset(x, y, controls)
    return ds, Truth(u, alpha, beta, eta, nonnull, controls)


def naive_control_scores(ds: Dataset, link: str) -> np.ndarray:
    """|Wald| of each outcome on X alone: OLS (identity) or logistic score test."""
    x = ds.x[:, 0] - ds.x[:, 0].mean()
    y = ds.y
    yc = y - y.mean(axis=0)
    sxx = float(x @ x)
    if link == "logit":
        ybar = y.mean(axis=0)
        denom = np.sqrt(ybar * (1 - ybar) * sxx)
        with np.errstate(invalid="ignore", divide="ignore"):
            stat = np.abs(x @ yc) / denom
        return np.where(np.isfinite(stat), stat, 0.0)
    b = x @ yc / sxx
    resid = yc - np.outer(x, b)
    s2 = (resid ** 2).sum(axis=0) / (ds.n - 2)
    return np.abs(b) / np.sqrt(s2 / sxx)


def apply_misspecification(ds: Dataset, truth: Truth, cfg: SimConfig, rep: int) -> Dataset:
    """Contaminate or reselect the declared control set."""
    if cfg.control_selection == "least_variable":
        stat = naive_control_scores(ds, cfg.link)
        chosen = np.argsort(stat, kind="stable")[: cfg.n_controls]
        return ds.with_controls(sorted(int(j) for j in chosen))
    if cfg.contamination == 0:
        return ds
    k = math.ceil(cfg.contamination * cfg.n_controls)
    pool = np.flatnonzero(truth.nonnull)
    if k > pool.size:
        raise ValidationError(f"infeasible contamination: need {k} non-null outcomes, have {pool.size}")
    rng = stream(cfg.seed, rep, "misspec")
    out = rng.choice(np.asarray(truth.true_controls), size=k, replace=False)
    inn = rng.choice(pool, size=k, replace=False)
    ctrl = (set(truth.true_controls) - set(int(j) for j in out)) | set(int(j) for j in inn)
    return ds.with_controls(sorted(ctrl))


def _fit_seeded(opts: DrOptions, cfg: SimConfig, rep: int) -> DrOptions:
    s = [int(v) for v in np.random.SeedSequence([cfg.seed, rep, ROLE["fit"]]).generate_state(4, np.uint64)]
    return replace(opts, seed=s[0], x_learner=opts.x_learner.with_seed(s[1]),
                   y_learner=opts.y_learner.with_seed(s[2]),
                   outer_learner=opts.outer_learner.with_seed(s[3]))


def _run_method(method: str, ds: Dataset, truth: Truth, cfg: SimConfig, rep: int) -> dict:
    tested = list(ds.tested_idx)
    nonnull = truth.nonnull[tested]
    beta_t = truth.beta[0, tested]
    rec = {m: float("nan") for m in METRICS}
    if method.startswith("glm"):
        cols = [np.ones(ds.n), ds.x]
        if method == "glm_oracle":
            cols.append(truth.u)
        z = np.column_stack(cols)
        est, se, pv, ok = wald_first_slope(z, ds.y_tested, cfg.link)
        pv = np.where(ok, pv, 1.0)  # non-converged fits never reject
    else:
        if method == "pii_true_u":
            emb = external_embedding(truth.u)
        else:
            emb = embed(ds, cfg.embed, cfg.embed_source)
            rec["proj_gap"] = projection_gap(np.column_stack([np.ones(ds.n), truth.u]),
                                             np.column_stack([np.ones(ds.n), emb.u_hat]))
        res = fit(ds, emb, _fit_seeded(cfg.learners, cfg, rep))
        phi = influence_values(res)
        rec["max_mean_phi"] = float(np.max(np.abs(phi.mean(axis=0))))
        est = res.beta_hat[0, tested]
        se = np.sqrt(np.array([res.cov_per_outcome[j][0, 0] for j in tested]))
        pv = res.pvalues[0, tested]
    fake = _PvalueHolder(pv, tested, ds.p)
    rep_ = test_outcomes(fake, cfg.alpha, cfg.q_fdr, nonnull)
    m = rep_.metrics
    rec.update(type1=m.type1, power=m.power, fdp=m.fdp, n_rejected_bh=float(m.n_rejected_bh))
    zq = norm.ppf(1 - cfg.alpha / 2)
    if nonnull.any():
        cover = np.abs(est - beta_t)[nonnull] <= zq * se[nonnull]
        rec["coverage"] = float(np.mean(cover))
    return rec


class _PvalueHolder:
    """Minimal stand-in exposing the fields ``test_outcomes`` reads."""

    def __init__(self, pv, tested, p):
        self.pvalues = np.full((1, p), np.nan)
        self.pvalues[0, tested] = pv
        self.tested_idx = tuple(tested)


def run_replication(cfg: SimConfig, rep: int) -> list[dict]:
    """Metrics of every configured method on one replication."""
    try:
        ds, truth = gen_partial_linear(cfg, rep)
        ds = apply_misspecification(ds, truth, cfg, rep)
    except (ValidationError, NumericalError, np.linalg.LinAlgError) as exc:
        return [{"method": m, "replication": rep, "failed": True, "error": str(exc)}
                for m in cfg.methods]
    out = []
    for method in cfg.methods:
        try:
            rec = _run_method(method, ds, truth, cfg, rep)
            rec.update(method=method, replication=rep, failed=False, error=None)
        except (ValidationError, NumericalError, np.linalg.LinAlgError) as exc:
            rec = {"method": method, "replication": rep, "failed": True, "error": str(exc)}
        out.append(rec)
    return out


def _mean_se(values: list[float]) -> tuple[float | None, float | None, int]:
    v = np.array([x for x in values if x is not None and not math.isnan(x)])
    if v.size == 0:
        return None, None, 0
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
    return float(v.mean()), se, int(v.size)


@dataclass(frozen=True)
class SimReport:
    """Per-replication records and per-method aggregates (mean, MC s.e.)."""

    config: dict
    records: tuple[dict, ...]
    aggregates: dict
    failures: dict = field(default_factory=dict)

    def aggregate(self, method: str, metric: str) -> float:
        v = self.aggregates[method][metric]["mean"]
        return float("nan") if v is None else v

    def mc_se(self, method: str, metric: str) -> float:
        v = self.aggregates[method][metric]["se"]
        return float("nan") if v is None else v

    def to_json_dict(self) -> dict:
        return {"config": self.config, "aggregates": self.aggregates,
                "failures": self.failures, "records": [_clean(r) for r in self.records]}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(dumps_json(self.to_json_dict()))

    def write_csv(self, path: str | Path) -> None:
        """Tidy table: one row per method x replication x metric."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "replication", "metric", "value"])
            for rec in self.records:
                if rec.get("failed"):
                    w.writerow([rec["method"], rec["replication"], "failed", 1])
                    continue
                for m in METRICS:
                    v = rec.get(m)
                    w.writerow([rec["method"], rec["replication"], m,
                                "" if v is None or math.isnan(v) else repr(float(v))])


def _clean(rec: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rec.items()}


def run_experiment(cfg: SimConfig, threads: int = 1) -> SimReport:
    """Run every replication and method; aggregate with Monte Carlo s.e.

    Replications run in ``threads`` worker processes; the report does not
    depend on the worker count. A failed replication is recorded and
    skipped; more than 10% failures for any method aborts the run.

    Parameters
    ----------
    cfg : SimConfig
    threads : int
        Worker processes (1 runs inline).

    Returns
    -------
    SimReport
    """
    reps = range(cfg.replications)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run_replication, [cfg] * cfg.replications, reps))
    else:
        chunks = [run_replication(cfg, rep) for rep in reps]
    records = tuple(rec for chunk in chunks for rec in chunk)
    aggregates, failures = {}, {}
    for method in cfg.methods:
        recs = [r for r in records if r["method"] == method]
        bad = [r for r in recs if r["failed"]]
        failures[method] = {"count": len(bad), "errors": sorted({r["error"] for r in bad})}
        if len(bad) > 0.1 * len(recs):
            raise NumericalError(
                f"{method}: {len(bad)} of {len(recs)} replications failed: {bad[0]['error']}")
        agg = {}
        for m in METRICS:
            mean, se, cnt = _mean_se([r[m] for r in recs if not r["failed"]])
            agg[m] = {"mean": mean, "se": se, "n": cnt}
        aggregates[method] = agg
    return SimReport(cfg.to_dict(), records, aggregates, failures)


# ------------------------------------------------------------ nuisance rates

def _gh_nodes(k: int = 40):
    z, w = np.polynomial.hermite_e.hermegauss(k)
    return z, w / w.sum()


def true_nuisances(cfg: SimConfig, rep: int, u: np.ndarray, cols: np.ndarray) -> dict:
    """Analytic E[X | U] and E[Y_j | U] for the replication's coefficients.

    X | U is Gaussian with mean u alpha' / (s^2 + |alpha|^2) and variance
    s^2 / (s^2 + |alpha|^2); E[Y | U] integrates the inverse link over it
    by Gauss-Hermite quadrature.
    """
    _, truth = gen_partial_linear(replace(cfg, n=2), rep)
    a = truth.alpha[0]
    s2 = cfg.sigma_eps ** 2
    denom = s2 + a @ a
    m = u @ a / denom
    sd = math.sqrt(s2 / denom)
    lin = u @ truth.eta[:, cols]
    b = truth.beta[0, cols]
    if cfg.link == "identity":
        ey = m[:, None] * b + lin
    else:
        z, w = _gh_nodes()
        xs = m[:, None] + sd * z[None, :]
        probs = expit(xs[:, :, None] * b[None, None, :] + lin[:, None, :])
        ey = np.einsum("ikj,k->ij", probs, w)
    return {"x": m, "y": ey}


@dataclass(frozen=True)
class RateRow:
    n: int
    target: str
    rmse: float


def nuisance_rate_study(n_grid, cfg: SimConfig, learner, *, reps: int = 5,
                        n_test: int = 1000, outcome_cols=(0,), targets=("x", "y"),
                        cv_folds: int = 3):
    """Hold-out L2 error of nuisance fits on the true U, with the log-log slope.

    Errors are root mean squared differences from the analytic regression
    function on ``n_test`` fresh noise-free points. ``learner`` is one spec
    or a sequence of specs; a sequence is tuned per sample size, replicate
    and target by ``cv_folds``-fold grid selection on the training rows.
    Returns (rows, slopes), where a slope is None when the grid has fewer
    than two sizes.
    """
    grid = [learner] if isinstance(learner, LearnerSpec) else list(learner)

    def pick(feat, targ, seed):
        if len(grid) == 1:
            return grid[0]
        return grid_select(feat, targ, grid, make_plan(feat.shape[0], cv_folds, seed))

    cols = np.asarray(outcome_cols)
    rows = []
    for n in n_grid:
        acc = {t: [] for t in targets}
        for rep in range(reps):
            big = replace(cfg, n=int(n) + n_test)
            ds, truth = gen_partial_linear(big, rep)
            u = truth.u
            tr, te = slice(0, n), slice(n, n + n_test)
            nu = true_nuisances(cfg, rep, u[te], cols)
            seed = int(np.random.SeedSequence([cfg.seed, rep, int(n)]).generate_state(1, np.uint64)[0])
            if "x" in targets:
                spec = pick(u[tr], ds.x[tr], seed).with_seed(seed)
                pred = fit_predict(spec, u[tr], ds.x[tr], [u[te]], stream=(1,))[0][:, 0]
                acc["x"].append(float(np.sqrt(np.mean((pred - nu["x"]) ** 2))))
            if "y" in targets:
                spec = pick(u[tr], ds.y[tr][:, cols], seed).with_seed(seed)
                pred = fit_predict(spec, u[tr], ds.y[tr][:, cols], [u[te]], stream=(2,))[0]
                acc["y"].append(float(np.sqrt(np.mean((pred - nu["y"]) ** 2))))
        for t in targets:
            rows.append(RateRow(int(n), t, float(np.mean(acc[t]))))
    slopes = {}
    for t in targets:
        pts = [(rw.n, rw.rmse) for rw in rows if rw.target == t]
        if len(pts) < 2:
            slopes[t] = None
        else:
            ln, le = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
            slopes[t] = float(linregress(ln, le).slope)
    return rows, slopes


# ---------------------------------------------------------- linear instances

def gen_linear_gaussian(seed: int, n: int, d: int, r: int, p: int, *, noise: float = 1.0,
                        coupling: float = 1.0):
    """Linear-Gaussian instance Y = X B + U H + E with X depending on U."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x11])))
    u = rng.standard_normal((n, r))
    x = coupling * u @ rng.uniform(-1, 1, (r, d)) + rng.standard_normal((n, d))
    b = rng.uniform(-1, 1, (d, p))
    h = rng.uniform(-1, 1, (r, p))
    y = x @ b + u @ h + noise * rng.standard_normal((n, p))
    return x, u, y, b
