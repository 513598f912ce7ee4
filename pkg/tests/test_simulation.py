import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from pii.data_model import Dataset, NumericalError, ValidationError
from pii.dr_estimator import DrOptions
from pii.embedding import EmbedConfig
from pii.nuisance import LearnerSpec
from pii.simulation import (
    SimConfig, apply_misspecification, gen_partial_linear, nuisance_rate_study, run_experiment,
    stream, true_nuisances,
)

SMALL = SimConfig(n=150, p=30, r=2, n_controls=10, link="identity", methods=("glm_naive",),
                  embed=EmbedConfig("pca", 2), replications=2, seed=3)


def test_default_design_shapes():
    cfg = SimConfig(n=60, p=1000, r=10, n_controls=500)
    ds, truth = gen_partial_linear(cfg, 0)
    assert ds.x.shape == (60, 1) and ds.y.shape == (60, 1000)
    assert ds.control_idx == tuple(range(500))
    assert np.all(truth.beta[0, :500] == 0)
    assert set(np.unique(truth.beta)) <= {0.0, 2.0}
    assert set(np.unique(ds.y)) <= {0.0, 1.0}
    assert np.all(np.abs(truth.eta) <= 1 / np.sqrt(10))


def test_all_null_design():
    _, truth = gen_partial_linear(replace(SMALL, nonnull_prob=0.0), 0)
    assert not truth.nonnull.any()


def test_logit_frequencies_match_expit():
    cfg = SimConfig(n=200_000, p=1, r=3, n_controls=0, nonnull_prob=1.0)
    ds, truth = gen_partial_linear(cfg, 0)
    z = (ds.x @ truth.beta + truth.u @ truth.eta)[:, 0]
    y = ds.y[:, 0]
    edges = np.quantile(z, np.linspace(0, 1, 21))
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (z >= lo) & (z < hi)
        expected = expit(z[sel]).mean()
        se = np.sqrt(expected * (1 - expected) / sel.sum())
        assert abs(y[sel].mean() - expected) <= 3 * se + 1e-12


def test_streams_regenerate_single_variables():
    ds, truth = gen_partial_linear(SMALL, 1)
    z = ds.x @ truth.beta + truth.u @ truth.eta
    y = z + stream(SMALL.seed, 1, "y").standard_normal(ds.y.shape)
    assert y.tobytes() == ds.y.tobytes()
    # changing n leaves the coefficient draws untouched
    _, other = gen_partial_linear(replace(SMALL, n=40), 1)
    assert other.eta.tobytes() == truth.eta.tobytes()
    assert other.alpha.tobytes() == truth.alpha.tobytes()


def test_contamination_swaps_exact_count():
    cfg = SimConfig(n=50, p=1000, r=10, n_controls=500, contamination=0.2)
    ds, truth = gen_partial_linear(cfg, 0)
    mis = apply_misspecification(ds, truth, cfg, 0)
    assert len(mis.control_idx) == 500
    assert int(truth.nonnull[list(mis.control_idx)].sum()) == 100
    assert apply_misspecification(ds, truth, replace(cfg, contamination=0.0), 0) is ds


def test_infeasible_contamination_raises():
    cfg = replace(SMALL, contamination=1.0, nonnull_prob=0.0)
    ds, truth = gen_partial_linear(cfg, 0)
    with pytest.raises(ValidationError, match="infeasible"):
        apply_misspecification(ds, truth, cfg, 0)


@pytest.mark.parametrize("link", ["identity", "logit"])
def test_least_variable_selection(link):
    cfg = replace(SMALL, link=link, nonnull_prob=0.0, control_selection="least_variable",
                  learners=DrOptions(link=link))
    ds, truth = gen_partial_linear(cfg, 0)
    mis = apply_misspecification(ds, truth, cfg, 0)
    assert len(mis.control_idx) == cfg.n_controls


def test_least_variable_avoids_strong_effects():
    cfg = replace(SMALL, n=400, nonnull_prob=0.5, effect_size=3.0,
                  control_selection="least_variable")
    ds, truth = gen_partial_linear(cfg, 0)
    mis = apply_misspecification(ds, truth, cfg, 0)
    assert truth.nonnull[list(mis.control_idx)].mean() < 0.2


def test_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(n_controls=200, p=200)
    with pytest.raises(ValidationError):
        SimConfig(methods=("magic",))
    with pytest.raises(ValidationError):
        SimConfig(link="identity", learners=DrOptions(link="logit"))
    assert SimConfig(link="identity").learners.link == "identity"


def test_report_determinism_and_serialisation(tmp_path):
    cfg = replace(SMALL, methods=("glm_naive", "glm_oracle", "pii_true_u", "pii_est_u"),
                  replications=1)
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    a.write_json(tmp_path / "a.json")
    b.write_json(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    obj = json.loads((tmp_path / "a.json").read_text())
    assert set(obj["aggregates"]) == set(cfg.methods)
    a.write_csv(tmp_path / "a.csv")
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "method,replication,metric,value" and len(rows) == 1 + 4 * 7
    assert a.aggregate("pii_est_u", "proj_gap") >= 0
    assert a.aggregate("pii_true_u", "max_mean_phi") <= 1e-8


def test_thread_count_does_not_change_report():
    cfg = replace(SMALL, methods=("glm_naive", "pii_true_u"), replications=3)
    one = run_experiment(cfg, threads=1).to_json_dict()
    two = run_experiment(cfg, threads=2).to_json_dict()
    assert json.dumps(one, sort_keys=True) == json.dumps(two, sort_keys=True)


def test_failures_abort_above_ten_percent():
    cfg = replace(SMALL, methods=("pii_est_u",), embed=EmbedConfig("pca", 50))
    with pytest.raises(NumericalError, match="replications failed"):
        run_experiment(cfg)


def test_power_dominates_type1_with_strong_signal():
    cfg = replace(SMALL, n=300, p=60, n_controls=20, effect_size=2.0, sigma_eps=1.0,
                  methods=("pii_true_u",), replications=4)
    rep = run_experiment(cfg)
    gap = rep.aggregate("pii_true_u", "power") - rep.aggregate("pii_true_u", "type1")
    se = np.hypot(rep.mc_se("pii_true_u", "power"), rep.mc_se("pii_true_u", "type1"))
    assert gap >= -3 * se


@pytest.mark.parametrize("link", ["identity", "logit"])
def test_true_nuisances_match_monte_carlo(link):
    cfg = replace(SMALL, link=link, learners=DrOptions(link=link), n=400_000, p=3, n_controls=0,
                  nonnull_prob=1.0)
    ds, truth = gen_partial_linear(cfg, 0)
    u = truth.u
    nu = true_nuisances(cfg, 0, u, np.array([0]))
    # regress X and Y on the true conditional means: slope 1, intercept 0
    for target, pred in ((ds.x[:, 0], nu["x"]), (ds.y[:, 0], nu["y"][:, 0])):
        z = np.column_stack([np.ones(cfg.n), pred])
        coef = np.linalg.lstsq(z, target, rcond=None)[0]
        resid = target - z @ coef
        cov = np.linalg.inv(z.T @ z) * resid.var()
        se = np.sqrt(np.diag(cov))
        assert abs(coef[0]) <= 4 * se[0] and abs(coef[1] - 1) <= 4 * se[1]


def test_rate_study_single_point_and_ols_rate():
    cfg = replace(SMALL, link="identity", r=3)
    rows, slopes = nuisance_rate_study([200], cfg, LearnerSpec("ols"), reps=2)
    assert slopes == {"x": None, "y": None} and len(rows) == 2
    _, slopes = nuisance_rate_study([200, 800, 3200], cfg, LearnerSpec("ols"), reps=10,
                                    targets=("x",))
    assert -0.65 <= slopes["x"] <= -0.35
