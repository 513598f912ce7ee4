import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pii.data_model import Dataset, ValidationError
from pii.embedding import (
    EmbedConfig, load_embedding, pca_embed, preprocess, projection_gap, ruv_embed,
    save_embedding,
)
from pii.simulation import SimConfig, gen_partial_linear


def _ds(yc, x=None, extra=1):
    n = yc.shape[0]
    x = np.arange(n, dtype=float) if x is None else x
    y = np.column_stack([yc, np.ones((n, extra))])
    return Dataset(x, y, tuple(range(yc.shape[1])))


def _gap_oracle(a, b):
    # explicit n-by-n projectors, largest singular value of the difference
    def perp(m):
        m = m if m.ndim == 2 else m[:, None]
        return np.eye(m.shape[0]) - m @ np.linalg.pinv(m)
    return np.linalg.svd(perp(a) - perp(b), compute_uv=False)[0]


def test_rank_one_reconstruction():
    rng = np.random.default_rng(0)
    u = rng.normal(size=12)
    u -= u.mean()
    w = rng.normal(size=5)
    yc = np.outer(u, w) + 3.0  # column offsets are removed by centering
    res = pca_embed(_ds(yc), EmbedConfig("pca", 1))
    centred = yc - yc.mean(axis=0)
    np.testing.assert_allclose(res.u_hat @ res.loadings.T, centred, atol=1e-10)
    assert projection_gap(u, res.u_hat) < 1e-10


def test_two_by_two_hand_oracle():
    # Gram matrix A'A = [[2,0],[0,0]]: top eigenvector e1, eigenvalue 2
    res = pca_embed(_ds(np.array([[1.0, 0.0], [-1.0, 0.0]])), EmbedConfig("pca", 1))
    np.testing.assert_allclose(res.loadings[:, 0], [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(res.u_hat[:, 0], [1.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(res.singular_values[0], np.sqrt(2.0), atol=1e-12)


def test_sign_convention_and_orthogonal_scores():
    rng = np.random.default_rng(1)
    res = pca_embed(_ds(rng.normal(size=(30, 6))), EmbedConfig("pca", 3))
    for k in range(3):
        col = res.loadings[:, k]
        assert col[np.argmax(np.abs(col))] >= 0
    g = res.u_hat.T @ res.u_hat
    np.testing.assert_allclose(g - np.diag(np.diag(g)), 0, atol=1e-8 * np.abs(g).max())


def test_nested_ranks():
    rng = np.random.default_rng(2)
    ds = _ds(rng.normal(size=(25, 7)))
    big = pca_embed(ds, EmbedConfig("pca", 4))
    small = pca_embed(ds, EmbedConfig("pca", 2))
    np.testing.assert_allclose(small.u_hat, big.u_hat[:, :2], atol=1e-12)


def test_row_permutation_equivariance():
    rng = np.random.default_rng(3)
    yc = rng.normal(size=(20, 5))
    perm = rng.permutation(20)
    a = pca_embed(_ds(yc), EmbedConfig("pca", 2))
    b = pca_embed(_ds(yc[perm]), EmbedConfig("pca", 2))
    np.testing.assert_allclose(b.u_hat, a.u_hat[perm], atol=1e-10)


def test_pca_errors():
    with pytest.raises(ValidationError, match="rank"):
        pca_embed(_ds(np.ones((3, 2)) + np.arange(3)[:, None]), EmbedConfig("pca", 3))
    with pytest.raises(ValidationError, match="zero matrix"):
        pca_embed(_ds(np.full((5, 2), 4.0)), EmbedConfig("pca", 1))


def test_ruv_equals_pca_when_x_is_orthogonal():
    rng = np.random.default_rng(4)
    n = 20
    yc = rng.normal(size=(n, 4))
    yc -= yc.mean(axis=0)
    x = rng.normal(size=n)
    x -= x.mean()
    # remove the component of x from every control column
    yc -= np.outer(x, x @ yc) / (x @ x)
    ds = _ds(yc, x)
    a = pca_embed(ds, EmbedConfig("pca", 2))
    b = ruv_embed(ds, EmbedConfig("ruv", 2))
    np.testing.assert_allclose(a.u_hat, b.u_hat, atol=1e-10)


def test_ruv_errors():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 1))
    with pytest.raises(ValidationError, match="zero matrix"):
        ruv_embed(_ds(x @ np.array([[1.0, -2.0, 0.5]]), x), EmbedConfig("ruv", 1))
    xx = np.column_stack([x, 2 * x])
    with pytest.raises(ValidationError, match="rank-deficient"):
        ruv_embed(_ds(rng.normal(size=(10, 3)), xx), EmbedConfig("ruv", 1))
    with pytest.raises(ValidationError, match="exceeds"):
        ruv_embed(_ds(rng.normal(size=(10, 3)), x), EmbedConfig("ruv", 4))


def test_ruv_beats_pca_when_signal_leaks_into_controls():
    cfg = SimConfig(n=400, p=120, r=3, n_controls=60, link="identity", contamination=0.5,
                    nonnull_prob=0.6,
                    control_selection="oracle", embed=EmbedConfig("pca", 3))
    from pii.simulation import apply_misspecification
    ds, truth = gen_partial_linear(cfg, 0)
    ds = apply_misspecification(ds, truth, cfg, 0)
    a = pca_embed(ds, EmbedConfig("pca", 3))
    b = ruv_embed(ds, EmbedConfig("ruv", 3))
    u = np.column_stack([np.ones(ds.n), truth.u])
    gap_pca = _gap_oracle(u, np.column_stack([np.ones(ds.n), a.u_hat]))
    gap_ruv = _gap_oracle(u, np.column_stack([np.ones(ds.n), b.u_hat]))
    assert gap_ruv < gap_pca


def test_preprocessing_order_and_library_size():
    m = np.array([[1.0, 3.0], [2.0, 2.0]])
    out = preprocess(m, EmbedConfig("pca", 1, ("library_size_normalize:4", "log1p")).preprocessing)
    np.testing.assert_allclose(out, np.log1p([[1.0, 3.0], [2.0, 2.0]]))
    with pytest.raises(ValidationError):
        EmbedConfig("pca", 1, ("whiten",))
    with pytest.raises(ValidationError):
        EmbedConfig("pca", 1, ("log1p:3",))


def test_split_fraction_applies_map_to_held_out_rows():
    rng = np.random.default_rng(6)
    res = pca_embed(_ds(rng.normal(size=(40, 5))), EmbedConfig("pca", 2, split_fraction=0.5, seed=4))
    assert len(res.fit_rows) == 20
    assert res.inference_rows.size == 20
    assert np.intersect1d(res.inference_rows, res.fit_rows).size == 0


def test_projection_gap_examples():
    e = np.eye(5)
    assert projection_gap(e[:, 0], e[:, 1]) == pytest.approx(1.0, abs=1e-12)
    g = projection_gap(np.array([1.0, 0.0]), np.array([1.0, 1.0]) / np.sqrt(2))
    assert g == pytest.approx(1 / np.sqrt(2), abs=1e-12)
    rng = np.random.default_rng(7)
    u = rng.normal(size=(15, 3))
    r = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    assert projection_gap(u, u @ r) < 1e-12
    with pytest.raises(ValidationError):
        projection_gap(u, np.column_stack([u[:, 0], u[:, 0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(3, 12), st.integers(1, 3), st.integers(1, 3))
def test_projection_gap_matches_dense_oracle(seed, n, r1, r2):
    rng = np.random.default_rng(seed)
    if max(r1, r2) >= n:
        return
    a = rng.normal(size=(n, r1))
    b = rng.normal(size=(n, r2))
    if rng.random() < 0.3:
        b[:, 0] = a[:, 0] + 1e-3 * rng.normal(size=n)
    g = projection_gap(a, b)
    assert 0.0 <= g <= 1.0
    assert g == pytest.approx(_gap_oracle(a, b), abs=1e-9)
    assert g == pytest.approx(projection_gap(b, a), abs=1e-12)


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    res = pca_embed(_ds(rng.normal(size=(10, 4))), EmbedConfig("pca", 2, ("center",)))
    save_embedding(res, tmp_path / "emb.csv")
    back = load_embedding(tmp_path / "emb.csv")
    assert back.u_hat.tobytes() == res.u_hat.tobytes()
    assert back.method == "pca" and back.preprocessing == res.preprocessing
    (tmp_path / "emb.json").unlink()
    assert load_embedding(tmp_path / "emb.csv").method == "external"
