"""CART regression trees, squared-error gradient boosting and bagged forests.

Trees are grown level by level. For every feature the rows are visited in a
global presorted order (computed once per design matrix), regrouped by their
current node with a stable sort, and all candidate thresholds of all frontier
nodes are scored at once from cumulative sums. Candidate thresholds are the
midpoints between consecutive distinct feature values; ties in the split gain
go to the lowest feature index, then the lowest threshold.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import as_matrix, as_vector, check_same_length
from .exceptions import ContractError

_EPS = np.finfo(np.float64).eps


@dataclass
class RegressionTree:
    """Binary regression tree stored as parallel node arrays.

    ``feature[i] == -1`` marks a leaf. Rows with ``x[feature] <= threshold``
    go to ``left``. Every node carries the (weighted) mean of the training
    targets routed to it in ``value``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int
    n_features: int

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def n_leaves(self):
        return int(np.count_nonzero(self.feature < 0))

    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X):
        """Leaf index reached by each row."""
        X = _check_features(X, self.n_features)
        node = np.zeros(X.shape[0], dtype=np.intp)
        for _ in range(self.max_depth):
            feat = self.feature[node]
            idx = np.flatnonzero(feat >= 0)
            if idx.size == 0:
                break
            nd = node[idx]
            go_left = X[idx, feat[idx]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        def build(i):
            if self.feature[i] < 0:
                return {"value": float(self.value[i])}
            return {
                "feature": int(self.feature[i]),
                "threshold": float(self.threshold[i]),
                "value": float(self.value[i]),
                "left": build(self.left[i]),
                "right": build(self.right[i]),
            }

        return {"max_depth": self.max_depth, "n_features": self.n_features, "root": build(0)}

    @classmethod
    def from_dict(cls, d):
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node):
            i = len(feature)
            feature.append(node.get("feature", -1))
            threshold.append(node.get("threshold", np.nan))
            value.append(node["value"])
            left.append(-1)
            right.append(-1)
            if "left" in node:
                left[i] = add(node["left"])
                right[i] = add(node["right"])
            return i

        add(d["root"])
        return cls(
            np.array(feature, dtype=np.intp),
            np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.intp),
            np.array(right, dtype=np.intp),
            np.array(value, dtype=np.float64),
            int(d["max_depth"]),
            int(d["n_features"]),
        )


def _check_features(X, n_features):
    X = as_matrix(X, "X")
    if X.shape[1] != n_features:
        raise ContractError(f"X has {X.shape[1]} features, the model was fitted with {n_features}")
    return X


def presort(X):
    """Column-wise stable argsort, reusable across fits on the same design matrix."""
    return np.argsort(X, axis=0, kind="stable")


def _grow(X, y, w, max_depth, min_leaf, order):
    """Grow a tree; returns the tree and the final node of every row (-1 if w == 0)."""
    n, d = X.shape
    active = w > 0
    if not active.any():
        raise ContractError("cannot fit a tree with no positively weighted rows")
    node_of = np.where(active, 0, -1)

    W0 = w[active].sum()
    feature = [-1]
    threshold = [np.nan]
    left = [-1]
    right = [-1]
    value = [float(np.dot(w[active], y[active]) / W0)]
    frontier = np.array([0])

    for _depth in range(max_depth):
        G = len(frontier)
        local_of_node = np.full(len(feature), -1)
        local_of_node[frontier] = np.arange(G)
        row_local = np.where(node_of >= 0, local_of_node[np.maximum(node_of, 0)], -1)
        in_frontier = row_local >= 0
        if not in_frontier.any():
            break
        rl = row_local[in_frontier]
        W = np.bincount(rl, weights=w[in_frontier], minlength=G)
        means = np.array([value[i] for i in frontier])
        yc = np.where(in_frontier, y - means[np.maximum(row_local, 0)], 0.0)
        sse = np.bincount(rl, weights=w[in_frontier] * yc[in_frontier] ** 2, minlength=G)
        ymax = np.zeros(G)
        np.maximum.at(ymax, rl, np.abs(y[in_frontier]))
        sse_floor = W * (64.0 * _EPS * ymax) ** 2
        splittable = sse > sse_floor

        best_gain = np.zeros(G)
        best_feat = np.full(G, -1)
        best_thr = np.zeros(G)
        if splittable.any():
            for j in range(d):
                o = order[:, j]
                g = row_local[o]
                keep = g >= 0
                o = o[keep]
                g = g[keep]
                perm = np.argsort(g, kind="stable")
                o = o[perm]
                g = g[perm]
                xs = X[o, j]
                ws = w[o]
                wy = ws * yc[o]
                counts = np.bincount(g, minlength=G)
                ends = np.cumsum(counts)
                starts = ends - counts
                cw = np.cumsum(ws)
                cwy = np.cumsum(wy)
                base_w = np.where(starts > 0, cw[np.maximum(starts - 1, 0)], 0.0)
                base_s = np.where(starts > 0, cwy[np.maximum(starts - 1, 0)], 0.0)
                wl = cw - base_w[g]
                sl = cwy - base_s[g]
                wr = W[g] - wl
                m = len(o)
                valid = np.zeros(m, dtype=bool)
                if m > 1:
                    valid[:-1] = (g[:-1] == g[1:]) & (xs[:-1] < xs[1:])
                valid &= (wl >= min_leaf) & (wr >= min_leaf) & splittable[g]
                if not valid.any():
                    continue
                gain = np.full(m, -np.inf)
                gain[valid] = sl[valid] ** 2 * (1.0 / wl[valid] + 1.0 / wr[valid])
                gmax = np.full(G, -np.inf)
                np.maximum.at(gmax, g, gain)
                hit = np.flatnonzero(valid & (gain == gmax[g]))
                grp, first = np.unique(g[hit], return_index=True)
                pos = hit[first]
                improve = gmax[grp] > best_gain[grp]
                grp, pos = grp[improve], pos[improve]
                best_gain[grp] = gmax[grp]
                best_feat[grp] = j
                lo, hi = xs[pos], xs[pos + 1]
                mid = lo + (hi - lo) / 2.0
                best_thr[grp] = np.where((mid >= lo) & (mid < hi), mid, lo)

        do_split = (best_feat >= 0) & (best_gain > 1e-12 * sse) & splittable
        if not do_split.any():
            break
        new_frontier = []
        for gi in np.flatnonzero(do_split):
            node = frontier[gi]
            j = best_feat[gi]
            thr = best_thr[gi]
            rows = np.flatnonzero(node_of == node)
            go_left = X[rows, j] <= thr
            li, ri = len(feature), len(feature) + 1
            for child_rows in (rows[go_left], rows[~go_left]):
                feature.append(-1)
                threshold.append(np.nan)
                left.append(-1)
                right.append(-1)
                value.append(float(np.dot(w[child_rows], y[child_rows]) / w[child_rows].sum()))
            node_of[rows[go_left]] = li
            node_of[rows[~go_left]] = ri
            feature[node] = int(j)
            threshold[node] = float(thr)
            left[node] = li
            right[node] = ri
            new_frontier.extend([li, ri])
        frontier = np.array(new_frontier)

    tree = RegressionTree(
        np.array(feature, dtype=np.intp),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        np.array(value, dtype=np.float64),
        int(max_depth),
        int(d),
    )
    return tree, node_of


def _check_tree_args(X, target, max_depth, min_leaf):
    X = as_matrix(X, "X")
    target = as_vector(target, "target")
    check_same_length(("X.rows", X), ("target", target))
    if int(max_depth) < 0:
        raise ContractError(f"max_depth must be >= 0, got {max_depth}")
    if min_leaf < 1:
        raise ContractError(f"min_leaf must be >= 1, got {min_leaf}")
    return X, target


def fit_tree(X_aug, target, max_depth=3, min_leaf=1, sample_weight=None, order=None):
    """Greedy variance-reduction CART regression tree.

    ``sample_weight`` (nonnegative, e.g. bootstrap counts) scales each row's
    contribution to split scores and leaf means; ``min_leaf`` applies to the
    summed weight. ``order`` is an optional precomputed :func:`presort`.
    """
    X, target = _check_tree_args(X_aug, target, max_depth, min_leaf)
    w = np.ones(len(target)) if sample_weight is None else as_vector(sample_weight, "sample_weight")
    if np.any(w < 0):
        raise ContractError("sample weights must be nonnegative")
    if order is None:
        order = presort(X)
    tree, _ = _grow(X, target, w, int(max_depth), min_leaf, order)
    return tree


@dataclass
class TreeEnsemble:
    """``prediction = base_value + sum_i tree_weights[i] * trees[i](x)``."""

    trees: list
    tree_weights: list
    base_value: float = 0.0
    n_features: int = 0
    train_prediction: np.ndarray = field(default=None, repr=False, compare=False)
    train_mse_path: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.trees) != len(self.tree_weights):
            raise ContractError("trees and tree_weights must have equal length")

    def tree_outputs(self, X):
        """n x n_trees matrix of individual (unweighted) tree predictions."""
        X = _check_features(X, self.n_features)
        if not self.trees:
            return np.zeros((X.shape[0], 0))
        return np.column_stack([t.predict(X) for t in self.trees])

    def predict(self, X):
        X = _check_features(X, self.n_features)
        out = np.full(X.shape[0], float(self.base_value))
        for wt, tree in zip(self.tree_weights, self.trees):
            out += wt * tree.predict(X)
        return out

    def to_dict(self):
        return {
            "base_value": float(self.base_value),
            "n_features": int(self.n_features),
            "tree_weights": [float(x) for x in self.tree_weights],
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [RegressionTree.from_dict(t) for t in d["trees"]],
            list(d["tree_weights"]),
            float(d["base_value"]),
            int(d["n_features"]),
        )


def predict(ensemble, X_aug):
    return ensemble.predict(X_aug)


def gbm_fit(X_aug, target, n_trees=100, learn_rate=0.1, max_depth=3, min_leaf=1, order=None):
    """Stagewise squared-error boosting from a zero base.

    Each tree fits the current inner residual ``target - prediction`` and is
    added with weight ``learn_rate``. The fixed tree budget always runs.
    """
    X, target = _check_tree_args(X_aug, target, max_depth, min_leaf)
    if int(n_trees) < 1:
        raise ContractError(f"n_trees must be >= 1, got {n_trees}")
    if not (0.0 < learn_rate <= 1.0):
        raise ContractError(f"learn_rate must lie in (0, 1], got {learn_rate}")
    if order is None:
        order = presort(X)
    w = np.ones(len(target))
    pred = np.zeros(len(target))
    trees = []
    mse_path = [float(np.mean(target**2))]
    for _ in range(int(n_trees)):
        tree, leaves = _grow(X, target - pred, w, int(max_depth), min_leaf, order)
        pred += learn_rate * tree.value[leaves]
        trees.append(tree)
        mse_path.append(float(np.mean((target - pred) ** 2)))
    return TreeEnsemble(
        trees,
        [float(learn_rate)] * len(trees),
        0.0,
        X.shape[1],
        train_prediction=pred,
        train_mse_path=np.array(mse_path),
    )


def tree_seed(seed, index):
    """Per-tree generator derived only from (seed, tree index)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def _bootstrap_tree(X, y, order, max_depth, min_leaf, seed, i, bootstrap_indices):
    n = len(y)
    if bootstrap_indices is not None:
        idx = np.asarray(bootstrap_indices(i, n))
    else:
        idx = tree_seed(seed, i).integers(0, n, n)
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    tree, _ = _grow(X, y, counts, int(max_depth), min_leaf, order)
    return tree


def rf_fit(X, y, n_trees=100, max_depth=5, seed=0, min_leaf=1, n_jobs=1, bootstrap_indices=None):
    """Bootstrap-bagged CART forest with equal weights ``1/n_trees``.

    Each tree sees a with-replacement resample of the rows (as integer sample
    weights); no feature subsampling. ``bootstrap_indices(tree_index, n)``
    overrides the resampling, which tests use to force particular samples.
    """
    X, y = _check_tree_args(X, y, max_depth, min_leaf)
    if int(n_trees) < 1:
        raise ContractError(f"n_trees must be >= 1, got {n_trees}")
    order = presort(X)
    args = (X, y, order, max_depth, min_leaf, seed)
    if n_jobs == 1:
        trees = [_bootstrap_tree(*args, i, bootstrap_indices) for i in range(int(n_trees))]
    else:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=n_jobs)(
            delayed(_bootstrap_tree)(*args, i, bootstrap_indices) for i in range(int(n_trees))
        )
    return TreeEnsemble(trees, [1.0 / n_trees] * int(n_trees), 0.0, X.shape[1])


# --- estimator wrappers -----------------------------------------------------


class CARTRegressor(RegressorMixin, BaseEstimator):
    def __init__(self, max_depth=3, min_leaf=1):
        self.max_depth = max_depth
        self.min_leaf = min_leaf

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.tree_ = fit_tree(X, y, self.max_depth, self.min_leaf, sample_weight=sample_weight)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        return self.tree_.predict(check_array(X, dtype=np.float64))


class ResidualBoostingRegressor(RegressorMixin, BaseEstimator):
    """Squared-error gradient boosting with a zero base value."""

    def __init__(self, n_trees=100, learning_rate=0.1, max_depth=3, min_leaf=1):
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_leaf = min_leaf

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.ensemble_ = gbm_fit(X, y, self.n_trees, self.learning_rate, self.max_depth, self.min_leaf)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.predict(check_array(X, dtype=np.float64))


class BaggedForestRegressor(RegressorMixin, BaseEstimator):
    """Bootstrap forest of CART trees (no feature subsampling)."""

    def __init__(self, n_trees=100, max_depth=5, min_leaf=1, random_state=0, n_jobs=1):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.ensemble_ = rf_fit(
            X, y, self.n_trees, self.max_depth, self.random_state, self.min_leaf, self.n_jobs
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.predict(check_array(X, dtype=np.float64))
