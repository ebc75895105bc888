import numpy as np
import pytest

from herdlife import baselines as bl
from herdlife.checkpoint import CheckpointError

from conftest import random_histories


# --- linear models -----------------------------------------------------------

def test_ols_exact_line():
    x = np.arange(10.0)[:, None]
    m = bl.ols_fit(x, 2 * x[:, 0] + 1)
    assert m.intercept == pytest.approx(1.0, abs=1e-9)
    assert m.coef[0] == pytest.approx(2.0, abs=1e-9)


def test_ols_residuals_orthogonal_to_design():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 5))
    y = X @ rng.normal(size=5) + rng.normal(size=200)
    m = bl.ols_fit(X, y)
    resid = y - m.predict(X)
    assert abs(resid.sum()) < 1e-8
    assert np.max(np.abs(X.T @ resid)) < 1e-8


def test_ols_three_point_hand_fit():
    # slope 3/2, intercept 4/3 - 3/2
    m = bl.ols_fit(np.array([[0.0], [1.0], [2.0]]), np.array([0.0, 1.0, 3.0]))
    assert m.coef[0] == pytest.approx(1.5, abs=1e-9)
    assert m.intercept == pytest.approx(-1 / 6, abs=1e-9)


def test_glm_ridge_three_point_hand_fit():
    # centred: Sxx = 2, Sxy = 3, so slope = 3 / (2 + 1) and intercept = 4/3 - 1
    m = bl.glm_fit(np.array([[0.0], [1.0], [2.0]]), 1.0, np.array([0.0, 1.0, 3.0]))
    assert m.coef[0] == pytest.approx(1.0, abs=1e-9)
    assert m.intercept == pytest.approx(1 / 3, abs=1e-9)


def test_glm_zero_penalty_equals_ols():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 4))
    y = X @ [1.0, -2.0, 0.5, 0.0] + 3 + rng.normal(size=100)
    a, b = bl.ols_fit(X, y), bl.glm_fit(X, 0.0, y)
    assert np.allclose(a.coef, b.coef, atol=1e-8)
    assert a.intercept == pytest.approx(b.intercept, abs=1e-8)


def test_glm_huge_penalty_predicts_mean():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 3))
    y = rng.normal(size=50) + 7
    m = bl.glm_fit(X, 1e12, y)
    assert np.max(np.abs(m.coef)) < 1e-9
    assert m.intercept == pytest.approx(y.mean())


def test_linear_fits_reject_bad_input():
    with pytest.raises(ValueError):
        bl.ols_fit(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(ValueError):
        bl.glm_fit(np.zeros((10, 1)), -1.0, np.zeros(10))


def test_ols_collinear_design_resolved_by_jitter():
    x = np.arange(20.0)
    m = bl.ols_fit(np.c_[x, x], x)
    assert np.allclose(m.predict(np.c_[x, x]), x, atol=1e-6)
    assert m.coef[0] == pytest.approx(m.coef[1], abs=1e-6)


def test_ols_non_finite_design_rejected():
    X = np.ones((5, 1))
    X[0, 0] = np.inf
    with pytest.raises(ValueError, match="degenerate"):
        bl.ols_fit(X, np.zeros(5))


# --- tabular view ------------------------------------------------------------

def test_tabularize_takes_latest_record():
    hs = random_histories(5, np.random.default_rng(3))
    rows = bl.tabularize(hs)
    for h, r in zip(hs, rows):
        assert np.array_equal(r.features, h.features[np.argmax(h.record_days)])
        assert r.hl_days == h.hl_days and r.cow_id == h.cow_id


# --- trees and forests -------------------------------------------------------

def single_tree(**kw):
    return bl.ForestConfig(**{"n_trees": 1, "max_depth": None, "min_samples_leaf": 1, "max_features": 2,
                              "bootstrap": False, **kw})


def test_single_tree_memorises():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 2))
    y = rng.normal(size=60)
    f = bl.rf_fit(X, single_tree(), "regression", y)
    assert np.allclose(bl.rf_predict(f, X), y)


def test_classification_tree_memorises():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(60, 2))
    y = rng.integers(0, 3, size=60)
    f = bl.rf_fit(X, single_tree(), "classification", y)
    assert np.array_equal(bl.rf_predict(f, X), y)


def test_forest_learns_step_function():
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, size=(400, 3))
    y = np.where(X[:, 1] > 0, 10.0, -10.0)
    f = bl.rf_fit(X, bl.ForestConfig(n_trees=20, max_features=3, seed=1), "regression", y)
    Xt = np.array([[0.0, 0.5, 0.0], [0.0, -0.5, 0.0]])
    assert np.allclose(bl.rf_predict(f, Xt), [10.0, -10.0])


def test_vote_ties_go_to_lower_class():
    assert bl.majority_vote([2, 1, 2, 1]) == 1
    assert bl.majority_vote([0, 2]) == 0
    assert bl.majority_vote([2, 2, 0]) == 2


def test_importance_sums_to_one_and_ignores_noise_feature():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(300, 3))
    X[:, 2] = 0.0                                # never splittable
    y = 3 * X[:, 0] + 0.1 * X[:, 1]
    f = bl.rf_fit(X, bl.ForestConfig(n_trees=10, max_features=3, seed=0), "regression", y)
    imp = bl.rf_feature_importance(f)
    assert imp.sum() == pytest.approx(1.0)
    assert imp[2] == 0.0
    assert imp.argmax() == 0


def test_importance_uniform_without_splits():
    X = np.zeros((20, 4))
    f = bl.rf_fit(X, bl.ForestConfig(n_trees=3, max_features=2), "regression", np.arange(20.0))
    assert np.allclose(bl.rf_feature_importance(f), 0.25)


def test_forest_deterministic_and_thread_independent(monkeypatch):
    rng = np.random.default_rng(8)
    X = rng.normal(size=(150, 4))
    y = X[:, 0] + rng.normal(size=150)
    cfg = bl.ForestConfig(n_trees=8, max_features=2, seed=3)
    a = bl.rf_predict(bl.rf_fit(X, cfg, "regression", y), X)
    monkeypatch.setenv("HERDLIFE_THREADS", "4")
    b = bl.rf_predict(bl.rf_fit(X, cfg, "regression", y), X)
    assert np.array_equal(a, b)


def test_forest_config_validation():
    with pytest.raises(ValueError):
        bl.ForestConfig(max_features=17).validate()
    with pytest.raises(ValueError):
        bl.ForestConfig(n_trees=0).validate()


# --- persistence -------------------------------------------------------------

def test_forest_save_load_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(100, 16))
    y = rng.integers(0, 3, size=100)
    f = bl.rf_fit(X, bl.ForestConfig(n_trees=5, seed=2), "classification", y)
    bl.save_baseline(f, tmp_path / "rf.ckpt", {"seed": 2})
    back, header = bl.load_baseline(tmp_path / "rf.ckpt")
    assert header["seed"] == 2
    assert np.array_equal(bl.rf_vote_fractions(f, X), bl.rf_vote_fractions(back, X))


def test_linear_save_load_bit_exact(tmp_path):
    rng = np.random.default_rng(10)
    X = rng.normal(size=(40, 16))
    m = bl.glm_fit(X, 0.5, rng.normal(size=40))
    bl.save_baseline(m, tmp_path / "glm.ckpt")
    back, _ = bl.load_baseline(tmp_path / "glm.ckpt")
    assert np.array_equal(m.predict(X), back.predict(X)) and back.kind == "glm"


def test_transformer_checkpoint_is_not_a_baseline(tmp_path):
    from herdlife import transformer as tf
    tf.save(tf.init_model(tf.ModelConfig(L=2, d_model=4, n_heads=1, n_layers=1, d_ff=4)), tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError):
        bl.load_baseline(tmp_path / "t.ckpt")
