import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pii.data_model import ValidationError
from pii.nuisance import (
    CrossFitPlan, LearnerSpec, fit_predict, fit_predict_crossfit, grid_select, make_plan,
)


def test_ols_matches_lstsq_oracle():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(50, 3))
    t = rng.normal(size=(50, 2))
    new = rng.normal(size=(7, 3))
    got = fit_predict(LearnerSpec("ols"), f, t, [new])[0]
    design = np.column_stack([np.ones(50), f])
    coef = np.linalg.lstsq(design, t, rcond=None)[0]
    np.testing.assert_allclose(got, np.column_stack([np.ones(7), new]) @ coef, atol=1e-10)


def test_ridge_oracle_with_unpenalized_intercept():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(40, 2))
    t = rng.normal(size=40)
    lam = 0.3
    got = fit_predict(LearnerSpec("ridge", lam=lam), f, t, [f])[0][:, 0]
    # augmented least squares: penalty rows on the slopes only
    aug = np.vstack([np.column_stack([np.ones(40), f]),
                     np.column_stack([np.zeros(2), np.sqrt(lam * 40) * np.eye(2)])])
    coef = np.linalg.lstsq(aug, np.concatenate([t, np.zeros(2)]), rcond=None)[0]
    np.testing.assert_allclose(got, np.column_stack([np.ones(40), f]) @ coef, atol=1e-10)


def test_knn_tie_break_and_brute_force():
    f = np.array([[0.0], [1.0], [-1.0], [3.0]])
    t = np.array([10.0, 20.0, 30.0, 40.0])
    got = fit_predict(LearnerSpec("knn", k=2), f, t, [np.array([[0.0]])])[0]
    # distances 0, 1, 1, 3: the tie at distance one goes to row 1
    assert got[0, 0] == 15.0
    rng = np.random.default_rng(2)
    f = rng.normal(size=(30, 2))
    t = rng.normal(size=30)
    q = rng.normal(size=(5, 2))
    got = fit_predict(LearnerSpec("knn", k=4), f, t, [q])[0][:, 0]
    for i in range(5):
        dist = [np.sum((f[j] - q[i]) ** 2) for j in range(30)]
        nn = sorted(range(30), key=lambda j: (dist[j], j))[:4]
        assert got[i] == pytest.approx(np.mean(t[nn]), abs=1e-12)


def test_zero_and_mean_learners():
    f = np.ones((4, 1))
    t = np.array([[1.0], [2.0], [3.0], [6.0]])
    assert np.all(fit_predict(LearnerSpec("zero"), f, t, [f])[0] == 0)
    assert np.all(fit_predict(LearnerSpec("mean"), f, t, [f])[0] == 3.0)


@pytest.mark.parametrize("kw", [dict(kind="nope"), dict(kind="ridge", lam=-1),
                                dict(kind="knn", k=0), dict(kind="random_forest", max_samples=0),
                                dict(kind="random_forest", m_try="bogus")])
def test_spec_validation(kw):
    with pytest.raises(ValidationError):
        LearnerSpec(**kw)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.integers(2, 10), st.integers(0, 2**32))
def test_plan_partitions_rows(n, k, seed):
    if k > n:
        with pytest.raises(ValidationError):
            make_plan(n, k, seed)
        return
    plan = make_plan(n, k, seed)
    seen = np.zeros(n, dtype=int)
    sizes = []
    for fold, tr, te in plan.folds():
        assert np.intersect1d(tr, te).size == 0
        assert tr.size + te.size == n
        seen[te] += 1
        sizes.append(te.size)
    assert np.all(seen == 1)
    assert max(sizes) - min(sizes) <= 1
    assert np.array_equal(make_plan(n, k, seed).fold_assignment, plan.fold_assignment)


def test_single_fold_plan_is_non_inferential():
    plan = make_plan(10, 1)
    assert not plan.inferential
    (_, tr, te), = plan.folds()
    assert np.array_equal(tr, te)


def test_out_of_fold_predictions_ignore_own_fold():
    # perturbing a row's target must not change that row's prediction
    rng = np.random.default_rng(3)
    f = rng.normal(size=(60, 2))
    t = rng.normal(size=60)
    plan = make_plan(60, 4, seed=5)
    spec = LearnerSpec("random_forest", n_trees=5, max_depth=3, min_leaf=2, seed=1)
    base = fit_predict_crossfit(f, t, spec, plan)
    t2 = t.copy()
    t2[0] += 100.0
    moved = fit_predict_crossfit(f, t2, spec, plan)
    same = plan.fold_assignment == plan.fold_assignment[0]
    np.testing.assert_array_equal(base[same], moved[same])
    assert not np.allclose(base[~same], moved[~same])


def test_alt_features_share_fold_models():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(30, 2))
    t = f @ np.array([1.0, -2.0]) + 0.5
    plan = make_plan(30, 3, seed=0)
    alt = f.copy()
    alt[:, 0] = 0.0
    pred, (alt_pred,) = fit_predict_crossfit(f, t, LearnerSpec("ols"), plan, [alt])
    np.testing.assert_allclose(pred, t, atol=1e-10)
    np.testing.assert_allclose(alt_pred, -2 * f[:, 1] + 0.5, atol=1e-10)


def test_fold_too_small_raises():
    plan = make_plan(12, 3, seed=0)
    with pytest.raises(ValidationError, match="fold too small"):
        fit_predict_crossfit(np.ones((12, 1)), np.ones(12),
                             LearnerSpec("random_forest", min_leaf=5), plan)


def test_grid_select_prefers_true_model_and_first_on_ties():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(200, 2))
    t = f @ np.array([2.0, -1.0]) + 0.1 * rng.normal(size=200)
    plan = make_plan(200, 5, seed=1)
    grid = [LearnerSpec("mean"), LearnerSpec("knn", k=10), LearnerSpec("ols")]
    assert grid_select(f, t, grid, plan).kind == "ols"
    tie = [LearnerSpec("ols"), LearnerSpec("ridge", lam=0.0)]
    res = grid_select(f, t, tie, plan, return_scores=True)
    assert res.best is tie[0] and res.scores[0] == pytest.approx(res.scores[1], rel=1e-9)


def test_grid_select_records_failures_and_needs_folds():
    f = np.ones((20, 1))
    t = np.arange(20.0)
    plan = make_plan(20, 2, seed=0)
    res = grid_select(f, t, [LearnerSpec("knn", k=15), LearnerSpec("mean")], plan,
                      return_scores=True)
    assert res.best.kind == "mean" and np.isinf(res.scores[0]) and res.failures
    with pytest.raises(ValidationError):
        grid_select(f, t, [LearnerSpec("knn", k=15)], plan)
    with pytest.raises(ValidationError):
        grid_select(f, t, [LearnerSpec("mean")], make_plan(20, 1))


def test_bad_plan_rejected():
    with pytest.raises(ValidationError):
        CrossFitPlan(3, np.array([0, 1, 1, 0]), 0)


@pytest.mark.parametrize("spec", [LearnerSpec("ols"), LearnerSpec("ridge", lam=2.0),
                                  LearnerSpec("knn", k=3),
                                  LearnerSpec("random_forest", n_trees=5, bootstrap=False,
                                              min_leaf=2)])
def test_constant_target_reproduced(spec):
    rng = np.random.default_rng(7)
    f = rng.normal(size=(40, 2))
    pred = fit_predict_crossfit(f, np.full(40, -1.75), spec, make_plan(40, 4, seed=2))
    tol = 0.0 if spec.kind == "random_forest" else 1e-10
    np.testing.assert_allclose(pred, -1.75, rtol=0, atol=tol)


def test_ols_identity_regression():
    rng = np.random.default_rng(8)
    f = rng.normal(size=(30, 2))
    pred = fit_predict_crossfit(f, f, LearnerSpec("ols"), make_plan(30, 2, seed=0))
    np.testing.assert_allclose(pred, f, atol=1e-8)
    refit = fit_predict_crossfit(f, f, LearnerSpec("ols"), make_plan(30, 1))
    np.testing.assert_allclose(refit, f, atol=1e-8)


def test_knn_one_neighbour_hand_example():
    x = np.array([[0.0], [1.0], [5.0], [7.0]])
    t = np.array([1.0, 2.0, 3.0, 4.0])
    plan = CrossFitPlan(2, np.array([0, 1, 0, 1]), 0)
    pred = fit_predict_crossfit(x, t, LearnerSpec("knn", k=1), plan)
    # other-fold neighbours: 0 -> 1, 1 -> 0, 5 -> 7, 7 -> 5
    np.testing.assert_array_equal(pred, [2.0, 1.0, 4.0, 3.0])


def test_grid_singleton_and_noise_prefers_shrinkage():
    rng = np.random.default_rng(9)
    f = rng.normal(size=(100, 1))
    plan = make_plan(100, 5, seed=3)
    only = LearnerSpec("knn", k=3)
    assert grid_select(f, rng.normal(size=100), [only], plan) is only
    noise = rng.normal(size=100)
    grid = [LearnerSpec("ridge", lam=0.0), LearnerSpec("ridge", lam=1e6)]
    res = grid_select(f, noise, grid, plan, return_scores=True)
    # oracle: recompute both CV errors directly
    oracle = []
    for lam in (0.0, 1e6):
        err = 0.0
        for _, tr, te in plan.folds():
            fc = f[tr] - f[tr].mean()
            slope = (fc[:, 0] @ (noise[tr] - noise[tr].mean())) / (fc[:, 0] @ fc[:, 0] + lam * tr.size)
            pred = noise[tr].mean() + (f[te, 0] - f[tr].mean()) * slope
            err += ((pred - noise[te]) ** 2).sum()
        oracle.append(err / 100)
    np.testing.assert_allclose(res.scores, oracle, rtol=1e-10)
    assert res.best is grid[int(np.argmin(oracle))] and res.best.lam == 1e6


def test_linear_data_selects_ols_over_wide_knn():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(100, 1))
    y = 2 * x[:, 0] + 0.3 * rng.normal(size=100)
    plan = make_plan(100, 5, seed=0)
    grid = [LearnerSpec("ols"), LearnerSpec("knn", k=50)]
    res = grid_select(x, y, grid, plan, return_scores=True)
    assert res.best.kind == "ols" and res.scores[0] < res.scores[1]
