import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.tree import DecisionTreeRegressor

from mcboost import weaklearn as W
from mcboost.exceptions import ContractError

STEP_X = np.array([[1.0], [2.0], [3.0], [4.0]])
STEP_Y = np.array([0.0, 0.0, 1.0, 1.0])


class TestFitTree:
    def test_constant_target_single_leaf(self):
        for depth in (0, 1, 5):
            tree = W.fit_tree(np.arange(3.0)[:, None], [5.0, 5.0, 5.0], depth)
            assert tree.n_nodes == 1 and tree.value[0] == 5.0

    def test_constant_target_with_roundoff_mean(self):
        tree = W.fit_tree(np.arange(3.0)[:, None], [0.1, 0.1, 0.1], 3)
        assert tree.n_nodes == 1

    def test_step_split(self):
        tree = W.fit_tree(STEP_X, STEP_Y, 1)
        assert tree.feature[0] == 0 and tree.threshold[0] == pytest.approx(2.5)
        np.testing.assert_array_equal(tree.predict(STEP_X), STEP_Y)

    def test_depth_zero_is_mean(self, rng):
        y = rng.normal(size=9)
        tree = W.fit_tree(rng.normal(size=(9, 2)), y, 0)
        np.testing.assert_allclose(tree.predict(np.zeros((2, 2))), np.mean(y))

    def test_matches_sklearn_unweighted(self, rng):
        X = rng.normal(size=(400, 4))
        y = X[:, 0] ** 2 + np.sin(X[:, 1])
        ours = W.fit_tree(X, y, 4)
        ref = DecisionTreeRegressor(max_depth=4).fit(X, y)
        np.testing.assert_allclose(ours.predict(X), ref.predict(X), atol=1e-12)

    def test_weights_equal_row_replication(self, rng):
        X = rng.normal(size=(120, 3))
        y = X[:, 0] - X[:, 2] ** 2
        w = rng.integers(0, 3, 120)
        a = W.fit_tree(X, y, 3, sample_weight=w.astype(float))
        b = W.fit_tree(np.repeat(X, w, axis=0), np.repeat(y, w), 3)
        np.testing.assert_allclose(a.predict(X), b.predict(X), atol=1e-12)

    def test_leaf_values_are_routed_means(self, rng):
        X = rng.normal(size=(60, 2))
        y = rng.normal(size=60)
        tree = W.fit_tree(X, y, 3)
        leaves = tree.apply(X)
        for leaf in np.unique(leaves):
            assert tree.value[leaf] == pytest.approx(y[leaves == leaf].mean(), abs=1e-12)
        assert tree.depth() <= 3

    def test_min_leaf(self, rng):
        X = rng.normal(size=(50, 2))
        tree = W.fit_tree(X, rng.normal(size=50), 6, min_leaf=5)
        assert np.bincount(tree.apply(X)).max() >= 5
        assert min(c for c in np.bincount(tree.apply(X)) if c) >= 5

    def test_errors(self):
        with pytest.raises(ContractError):
            W.fit_tree(np.zeros((0, 1)), [], 2)
        with pytest.raises(ContractError):
            W.fit_tree(STEP_X, STEP_Y[:3], 2)
        with pytest.raises(ContractError):
            W.fit_tree(STEP_X, STEP_Y, 2, sample_weight=np.zeros(4))

    def test_json_round_trip(self, rng):
        X = rng.normal(size=(40, 3))
        tree = W.fit_tree(X, rng.normal(size=40), 3)
        back = W.RegressionTree.from_dict(json.loads(json.dumps(tree.to_dict())))
        np.testing.assert_array_equal(back.predict(X), tree.predict(X))


def _exhaustive_root(X, y):
    best = (0.0, None, None)
    n, d = X.shape
    sse = np.sum((y - y.mean()) ** 2)
    for j in range(d):
        vals = np.unique(X[:, j])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = lo + (hi - lo) / 2
            L = X[:, j] <= thr
            child = np.sum((y[L] - y[L].mean()) ** 2) + np.sum((y[~L] - y[~L].mean()) ** 2)
            gain = sse - child
            if gain > best[0] + 1e-12 * max(sse, 1e-300):
                best = (gain, j, thr)
    return best


@given(st.integers(2, 30), st.integers(1, 3), st.integers(0, 10_000))
def test_root_split_matches_exhaustive_search(n, d, seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(n, d)), 1)
    y = np.round(rng.normal(size=n), 2)
    tree = W.fit_tree(X, y, 1)
    gain, j, thr = _exhaustive_root(X, y)
    if j is None:
        assert tree.n_nodes == 1
    else:
        L = X[:, tree.feature[0]] <= tree.threshold[0]
        ours = np.sum((y - y.mean()) ** 2) - (
            np.sum((y[L] - y[L].mean()) ** 2) + np.sum((y[~L] - y[~L].mean()) ** 2)
        )
        assert ours == pytest.approx(gain, rel=1e-9, abs=1e-12)


class TestGbm:
    def test_zero_target(self):
        ens = W.gbm_fit(STEP_X, np.zeros(4), n_trees=5)
        np.testing.assert_array_equal(ens.predict(STEP_X), 0.0)

    def test_step_data_converges(self):
        ens = W.gbm_fit(STEP_X, STEP_Y, n_trees=100, learn_rate=0.1, max_depth=1)
        assert ens.train_mse_path[-1] <= 1e-6

    def test_single_tree_full_rate(self, rng):
        X = rng.normal(size=(30, 2))
        y = rng.normal(size=30)
        ens = W.gbm_fit(X, y, n_trees=1, learn_rate=1.0, max_depth=2)
        np.testing.assert_allclose(ens.predict(X), W.fit_tree(X, y, 2).predict(X), atol=1e-15)

    def test_training_cache_matches_fresh_prediction(self):
        ens = W.gbm_fit(STEP_X, STEP_Y, n_trees=100, learn_rate=0.1, max_depth=1)
        np.testing.assert_allclose(ens.predict(STEP_X), ens.train_prediction, atol=1e-12)

    def test_mse_monotone(self, rng):
        X = rng.normal(size=(200, 3))
        y = np.sin(3 * X[:, 0]) + X[:, 1] * X[:, 2]
        path = W.gbm_fit(X, y, n_trees=60).train_mse_path
        assert np.all(np.diff(path) <= 0)

    @pytest.mark.parametrize("kw", [{"n_trees": 0}, {"learn_rate": 0.0}, {"learn_rate": 1.5}])
    def test_contract(self, kw):
        with pytest.raises(ContractError):
            W.gbm_fit(STEP_X, STEP_Y, **kw)


class TestForest:
    def test_constant_target(self):
        ens = W.rf_fit(STEP_X, np.full(4, 2.5), n_trees=7, seed=3)
        np.testing.assert_allclose(ens.predict(STEP_X), 2.5)

    def test_identity_bootstrap_equals_tree(self, rng):
        X = rng.normal(size=(25, 2))
        y = rng.normal(size=25)
        ens = W.rf_fit(X, y, n_trees=1, max_depth=4, bootstrap_indices=lambda i, n: np.arange(n))
        np.testing.assert_array_equal(ens.predict(X), W.fit_tree(X, y, 4).predict(X))

    def test_deterministic(self, rng):
        X = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        a = W.rf_fit(X, y, n_trees=10, seed=7).predict(X)
        b = W.rf_fit(X, y, n_trees=10, seed=7).predict(X)
        c = W.rf_fit(X, y, n_trees=10, seed=7, n_jobs=2).predict(X)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)
        assert not np.array_equal(a, W.rf_fit(X, y, n_trees=10, seed=8).predict(X))

    def test_equal_weights(self):
        ens = W.rf_fit(STEP_X, STEP_Y, n_trees=4)
        assert ens.tree_weights == [0.25] * 4 and ens.base_value == 0.0


class TestEnsemble:
    def test_empty(self):
        ens = W.TreeEnsemble([], [], base_value=1.5, n_features=2)
        np.testing.assert_array_equal(ens.predict(np.zeros((3, 2))), 1.5)

    def test_single_leaf(self):
        leaf = W.fit_tree(np.zeros((2, 1)), [2.0, 2.0], 0)
        ens = W.TreeEnsemble([leaf], [0.1], 0.0, 1)
        np.testing.assert_allclose(ens.predict(np.zeros((3, 1))), 0.2)

    def test_feature_mismatch(self):
        ens = W.gbm_fit(STEP_X, STEP_Y, n_trees=2)
        with pytest.raises(ContractError):
            ens.predict(np.zeros((2, 3)))

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            W.TreeEnsemble([], [0.1])

    def test_json_round_trip(self, rng):
        X = rng.normal(size=(30, 2))
        ens = W.gbm_fit(X, rng.normal(size=30), n_trees=5)
        back = W.TreeEnsemble.from_dict(json.loads(json.dumps(ens.to_dict())))
        np.testing.assert_array_equal(back.predict(X), ens.predict(X))


class TestEstimators:
    def test_sklearn_api(self, rng):
        X = rng.normal(size=(80, 3))
        y = X[:, 0] + 0.1 * rng.normal(size=80)
        for est in (W.CARTRegressor(3), W.ResidualBoostingRegressor(20), W.BaggedForestRegressor(10, 3)):
            est.fit(X, y)
            assert est.predict(X).shape == (80,)
            assert est.score(X, y) > 0.5
            assert set(est.get_params()) >= {"max_depth"}
