import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from dischargepred import trees
from dischargepred.errors import DataError
from dischargepred.features import SparseVector
from dischargepred.trees import (GINI, NEWTON, WARN_SINGLE_CLASS, BinnedRows, TreeFitParams, fit_cart,
                                 fit_gbm_first_order, fit_gbm_second_order, fit_random_forest, log_loss,
                                 model_from_json, model_to_json, pick_best, predict_proba)

from helpers import check_tree_against_oracle, random_tree_data


def test_separating_feature_gives_depth_one_pure_leaves():
    X = np.array([[0.0, 5.0], [0.0, 1.0], [1.0, 5.0], [1.0, 2.0]])
    y = np.array([0, 0, 1, 1.0])
    t = fit_cart(X, y)
    assert t.depth == 1 and t.feature[0] == 0 and t.threshold[0] == 0.5
    assert sorted(t.value[[t.left[0], t.right[0]]].tolist()) == [0.0, 1.0]
    assert np.array_equal(t.predict(X), y)


def test_pure_node_is_a_leaf():
    t = fit_cart(np.random.default_rng(0).random((10, 3)), np.ones(10))
    assert t.n_nodes == 1 and t.value[0] == 1.0


def test_newton_leaf_single_sample():
    # y = 1 at p = 0.5: g = -0.5, h = 0.25, leaf = -g / h = 2
    t = fit_cart(np.zeros((1, 1)), [-0.5], mode=NEWTON, hessians=[0.25], reg_lambda=0.0)
    assert t.n_nodes == 1 and t.value[0] == 2.0


def test_gbm2_margin_step_from_single_node_tree():
    # one boosting round on {y=1, p=0.5} moves the margin by eta * 2
    t = fit_cart(np.zeros((1, 1)), [-0.5], mode=NEWTON, hessians=[0.25], reg_lambda=0.0)
    eta = 0.3
    m = trees.BoostedModel(0.0, [t], eta, trees.SECOND_ORDER, TreeFitParams(), 1)
    assert m.margin(np.zeros((1, 1)))[0] == pytest.approx(eta * 2.0)


def test_pseudo_residual():
    y = np.array([1.0])
    p = trees._sigmoid(np.array([0.0]))
    assert (y - p)[0] == 0.5


def test_large_lambda_shrinks_leaves():
    X, y = random_tree_data(np.random.default_rng(3), 40, 4)
    g = 0.5 - y
    for lam, bound in ((1e6, 1e-4), (1e12, 1e-10)):
        t = fit_cart(X, g, mode=NEWTON, hessians=np.full(len(y), 0.25), reg_lambda=lam)
        assert np.abs(t.value).max() < bound


def test_zero_rounds_predict_prevalence():
    X, y = random_tree_data(np.random.default_rng(4), 40, 3)
    for fit in (fit_gbm_first_order, fit_gbm_second_order):
        m = fit(X, y, TreeFitParams(n_trees=0))
        assert np.allclose(m.predict_proba(X), y.mean())


def test_single_class_labels_warn_and_return_base_model(caplog):
    X = np.random.default_rng(0).random((8, 2))
    m = fit_gbm_second_order(X, np.ones(8), TreeFitParams(n_trees=5))
    assert m.warnings == [WARN_SINGLE_CLASS] and m.trees == []
    assert np.all(m.predict_proba(X) > 0.999)
    m = fit_gbm_first_order(X, np.zeros(8), TreeFitParams(n_trees=5))
    assert m.warnings == [WARN_SINGLE_CLASS] and np.all(m.predict_proba(X) < 1e-3)


def test_non_binary_labels_rejected():
    with pytest.raises(DataError):
        fit_gbm_second_order(np.zeros((3, 1)), [0, 1, 2], TreeFitParams(n_trees=1))


def test_forest_of_one_unbagged_tree_equals_cart():
    X, y = random_tree_data(np.random.default_rng(5), 50, 6)
    p = TreeFitParams(n_trees=1, bootstrap=False, features_per_split=None, min_samples_leaf=2)
    f = fit_random_forest(X, y, p, seed=0)
    t = fit_cart(X, y, params=p)
    assert np.array_equal(f.predict_proba(X), t.predict(X))


def test_forest_averages_member_trees():
    t1 = trees.Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([0.2]))
    t2 = trees.Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([0.6]))
    f = trees.ForestModel([t1, t2], TreeFitParams(), 1)
    assert f.predict_proba(np.zeros((1, 1)))[0] == pytest.approx(0.4)


def _separable(rng, n=120, d=6):
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    y = (X @ w > 0).astype(float)
    return X, y


def test_bagging_sanity():
    wins = 0
    for s in range(20):
        rng = np.random.default_rng(100 + s)
        X, y = _separable(rng)
        params = TreeFitParams(n_trees=25, features_per_split="sqrt", min_samples_leaf=3)
        forest = fit_random_forest(X, y, params, seed=s)
        single = fit_random_forest(X, y, TreeFitParams(n_trees=1, features_per_split="sqrt", min_samples_leaf=3),
                                   seed=s)
        acc_f = np.mean((forest.predict_proba(X) >= 0.5) == y)
        acc_t = np.mean((single.predict_proba(X) >= 0.5) == y)
        wins += acc_f >= acc_t
    assert wins >= 18


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), min_leaf=st.integers(1, 4), depth=st.sampled_from([None, 1, 2, 3]))
def test_gini_tree_matches_exhaustive_oracle(seed, min_leaf, depth):
    rng = np.random.default_rng(seed)
    X, y = random_tree_data(rng)
    w = rng.integers(1, 3, len(y)).astype(float) if seed % 3 == 0 else np.ones(len(y))
    params = TreeFitParams(max_depth=depth, min_samples_leaf=min_leaf, bootstrap=False)
    t = fit_cart(X, y, weights=w, params=params)
    assert check_tree_against_oracle(t, X, np.arange(len(y)), w, w * y, "gini", min_leaf, depth) == []


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.sampled_from([0.0, 0.5, 1.0, 10.0]))
def test_newton_tree_matches_exhaustive_oracle(seed, lam):
    rng = np.random.default_rng(seed)
    X, y = random_tree_data(rng)
    p = rng.uniform(0.05, 0.95, len(y))
    g, h = p - y, p * (1 - p)
    params = TreeFitParams(max_depth=3, min_samples_leaf=2, bootstrap=False)
    t = fit_cart(X, g, mode=NEWTON, hessians=h, params=params, reg_lambda=lam)
    assert check_tree_against_oracle(t, X, np.arange(len(y)), g, h, "newton", 2, 3, lam) == []


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_newton_leaf_minimises_regularised_quadratic(seed):
    rng = np.random.default_rng(seed)
    X, y = random_tree_data(rng, 30, 3)
    p = rng.uniform(0.05, 0.95, len(y))
    g, h = p - y, p * (1 - p)
    lam = float(rng.uniform(0, 2))
    t = fit_cart(X, g, mode=NEWTON, hessians=h, params=TreeFitParams(max_depth=2, bootstrap=False), reg_lambda=lam)
    leaf = t.apply(X)
    for node in np.unique(leaf):
        G, H = g[leaf == node].sum(), h[leaf == node].sum()
        grid = np.linspace(t.value[node] - 1, t.value[node] + 1, 2001)
        obj = G * grid + 0.5 * (H + lam) * grid**2
        assert abs(grid[np.argmin(obj)] - t.value[node]) <= 1e-3


def test_ties_go_to_earliest_candidate():
    assert pick_best(np.array([1.0, 3.0, 3.0 - 1e-14, 2.0])) == 1
    assert pick_best(np.array([3.0 - 1e-14, 3.0])) == 0
    # duplicated columns: the lower feature index wins
    X = np.array([[0, 0], [1, 1], [0, 0], [1, 1.0]])
    t = fit_cart(X, np.array([0, 1, 0, 1.0]))
    assert t.feature[0] == 0


def test_sparse_and_dense_input_agree():
    X, y = random_tree_data(np.random.default_rng(8), 50, 8)
    a = fit_cart(X, y, params=TreeFitParams(min_samples_leaf=2, bootstrap=False))
    b = fit_cart(sp.csr_matrix(X), y, params=TreeFitParams(min_samples_leaf=2, bootstrap=False))
    assert a.to_dict() == b.to_dict()


def test_binned_rows_keys_cover_zero_bins():
    X = np.array([[0.0, 2.0], [1.5, 0.0], [0.0, 2.0]])
    B = BinnedRows(X)
    assert B.total_bins == 4
    assert B.bin_value.tolist() == [0.0, 1.5, 0.0, 2.0]
    assert B.zero_key.tolist() == [0, 2]


def test_feature_subsampling_still_finds_a_split():
    # only feature 3 is informative and every other column is constant
    X = np.zeros((20, 9))
    X[:, 3] = np.arange(20) % 2
    y = X[:, 3].copy()
    t = fit_cart(X, y, params=TreeFitParams(features_per_split=2, bootstrap=False))
    assert t.feature[0] == 3


def test_n_split_features():
    assert TreeFitParams(features_per_split="sqrt").n_split_features(322) == 18
    assert TreeFitParams(features_per_split=None).n_split_features(10) == 10
    assert TreeFitParams(features_per_split=0.25).n_split_features(10) == 3
    assert TreeFitParams(features_per_split=50).n_split_features(10) == 10


@pytest.mark.parametrize("bad", [dict(max_depth=0), dict(min_samples_leaf=0), dict(subsample=0.0),
                                 dict(subsample=1.5), dict(learning_rate=0.0), dict(reg_lambda=-1.0),
                                 dict(features_per_split="log2"), dict(features_per_split=0)])
def test_invalid_params(bad):
    with pytest.raises(ValueError):
        TreeFitParams(**bad).validate()


@pytest.mark.parametrize("fit,eta", [(fit_gbm_first_order, 0.1), (fit_gbm_second_order, 0.3)])
def test_boosting_training_loss_is_non_increasing(fit, eta):
    X, y = random_tree_data(np.random.default_rng(9), 50, 6)
    losses = []
    fit(X, y, TreeFitParams(n_trees=30, learning_rate=eta, subsample=1.0, max_depth=3, min_samples_leaf=1),
        seed=0, callback=lambda r, yy, p: losses.append(log_loss(yy, p)))
    p0 = np.full(len(y), y.mean())
    seq = [log_loss(y, p0)] + losses
    assert all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))


def test_adding_an_all_positive_tree_never_lowers_scores():
    X, y = random_tree_data(np.random.default_rng(10), 40, 4)
    m = fit_gbm_second_order(X, y, TreeFitParams(n_trees=5, max_depth=2))
    before = m.predict_proba(X)
    t = fit_cart(X, np.abs(np.random.default_rng(0).normal(size=len(y))) * -1, mode=NEWTON,
                 params=TreeFitParams(max_depth=2, bootstrap=False))
    assert np.all(t.value >= 0)
    m.trees.append(t)
    assert np.all(m.predict_proba(X) >= before)


@pytest.mark.parametrize("kind", ["forest", "gbm1", "gbm2"])
def test_fit_is_deterministic_and_json_round_trip_is_exact(kind):
    X, y = random_tree_data(np.random.default_rng(11), 50, 6)
    params = TreeFitParams(n_trees=6, max_depth=3, subsample=0.7 if kind == "gbm1" else 1.0,
                           features_per_split="sqrt" if kind == "forest" else None)
    fit = {"forest": fit_random_forest, "gbm1": fit_gbm_first_order, "gbm2": fit_gbm_second_order}[kind]
    a, b = fit(X, y, params, seed=4), fit(X, y, params, seed=4)
    assert model_to_json(a) == model_to_json(b)
    back = model_from_json(model_to_json(a))
    assert model_to_json(back) == model_to_json(a)
    assert np.array_equal(back.predict_proba(X), a.predict_proba(X))


def test_forest_is_independent_of_worker_count():
    X, y = random_tree_data(np.random.default_rng(12), 50, 6)
    params = TreeFitParams(n_trees=8, features_per_split="sqrt")
    a = fit_random_forest(X, y, params, seed=1, n_jobs=1)
    b = fit_random_forest(X, y, params, seed=1, n_jobs=2)
    assert model_to_json(a) == model_to_json(b)


def test_width_mismatch_is_a_data_error():
    X, y = random_tree_data(np.random.default_rng(13), 30, 4)
    X[:, 0] = y
    m = fit_gbm_second_order(X, y, TreeFitParams(n_trees=2))
    with pytest.raises(DataError):
        m.predict_proba(np.zeros((2, X.shape[1] + 1)))


def test_predict_proba_accepts_sparse_vector():
    X, y = random_tree_data(np.random.default_rng(14), 30, 4)
    X[:, 1] = y * 2
    m = fit_gbm_second_order(X, y, TreeFitParams(n_trees=3))
    nz = np.flatnonzero(X[0])
    v = SparseVector(nz, X[0, nz], X.shape[1])
    assert predict_proba(m, v)[0] == m.predict_proba(X[:1])[0]


def test_model_file_version_checked():
    with pytest.raises(DataError):
        model_from_json('{"format": "something-else", "version": 1}')
