"""Scikit-learn style estimator around :func:`mcboost.dynamics.run`."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import dynamics as dyn
from .exceptions import ContractError
from .hypotheses import eval_B, intercept_slope_class
from .weaklearn import TreeEnsemble, rf_fit

RULES = ("unit", "relaxed", "adaptive", "hybrid")
ORACLES = ("trees", "exact")
INITS = ("forest", "zero")


class MulticalibrationBooster(RegressorMixin, BaseEstimator):
    """Multicalibration gradient boosting on top of an initial predictor.

    Parameters
    ----------
    rule : {"unit", "relaxed", "adaptive", "hybrid"}
        Rescaling rule applied to each round's candidate predictor.
    oracle : {"trees", "exact"}
        ``"trees"`` fits a squared-error booster on ``[X | f]`` each round;
        ``"exact"`` projects residuals onto ``hypothesis_class``.
    eta : float
        Shrinkage in ``(0, 1]``.
    n_rounds : int
        Number of boosting rounds ``T``.
    schedule : callable, optional
        Weight schedule for the relaxed rule (default ``1 - (t+2)^-3``).
    hypothesis_class : FactorizedClass, optional
        Exact-mode class; defaults to the intercept/slope class on ``X``.
    n_trees, learning_rate, max_depth, min_leaf
        Inner booster settings for the tree oracle.
    gamma_mix : float
        Strong-learner mixing weight of the hybrid rule.
    strong_model : estimator, optional
        Strong predictor for the hybrid rule. Cloned and fitted on the
        training data unless ``strong_pred`` is passed to :meth:`fit`.
    init : {"forest", "zero"}
        Initial predictor when ``f0`` is not given: a bagged forest of
        ``init_n_trees`` trees of depth ``init_max_depth``, or zeros.
    random_state : int
        Seed of the initial forest.
    """

    def __init__(
        self,
        rule="unit",
        oracle="trees",
        eta=1.0,
        n_rounds=20,
        schedule=None,
        hypothesis_class=None,
        rank_tol=1e-12,
        n_trees=100,
        learning_rate=0.1,
        max_depth=3,
        min_leaf=1,
        gamma_mix=1.0,
        strong_model=None,
        init="forest",
        init_n_trees=100,
        init_max_depth=5,
        random_state=0,
    ):
        self.rule = rule
        self.oracle = oracle
        self.eta = eta
        self.n_rounds = n_rounds
        self.schedule = schedule
        self.hypothesis_class = hypothesis_class
        self.rank_tol = rank_tol
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.gamma_mix = gamma_mix
        self.strong_model = strong_model
        self.init = init
        self.init_n_trees = init_n_trees
        self.init_max_depth = init_max_depth
        self.random_state = random_state

    def _validate_params(self):
        if self.rule not in RULES:
            raise ContractError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.oracle not in ORACLES:
            raise ContractError(f"oracle must be one of {ORACLES}, got {self.oracle!r}")
        if self.init not in INITS:
            raise ContractError(f"init must be one of {INITS}, got {self.init!r}")
        if int(self.n_rounds) < 1:
            raise ContractError(f"n_rounds must be >= 1, got {self.n_rounds}")

    def _make_mode(self, X):
        if self.oracle == "exact":
            hc = self.hypothesis_class if self.hypothesis_class is not None else intercept_slope_class(X)
            return dyn.ExactProjection(hc, self.rank_tol)
        return dyn.BoostedTrees(self.n_trees, self.learning_rate, self.max_depth, self.min_leaf)

    def _initial(self, X, f0):
        if f0 is not None:
            f0 = np.asarray(f0, dtype=np.float64)
            if f0.shape != (X.shape[0],):
                raise ContractError(f"f0 has shape {f0.shape}, expected ({X.shape[0]},)")
            return f0
        if self.init_ is None:
            return np.zeros(X.shape[0])
        return self.init_.predict(X)

    def fit(self, X, y, f0=None, strong_pred=None):
        """Run ``n_rounds`` of boosting from ``f0`` (default: the initial predictor)."""
        self._validate_params()
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.init_ = None
        if f0 is None and self.init == "forest":
            self.init_ = rf_fit(X, y, self.init_n_trees, self.init_max_depth, seed=self.random_state)
        f_start = self._initial(X, f0)

        self.strong_model_ = None
        if self.rule == "hybrid":
            if strong_pred is None:
                if self.strong_model is None:
                    raise ContractError("the hybrid rule needs strong_pred or strong_model")
                self.strong_model_ = clone(self.strong_model).fit(X, y)
                strong_pred = self.strong_model_.predict(X)
            rule = dyn.Hybrid(self.gamma_mix, strong_pred)
        elif self.rule == "relaxed":
            rule = dyn.Relaxed(self.schedule if self.schedule is not None else dyn.PowerLawSchedule())
        elif self.rule == "adaptive":
            rule = dyn.Adaptive()
        else:
            rule = dyn.Unit()

        self.mode_ = self._make_mode(X)
        self.rule_ = rule
        self.trace_ = dyn.run(
            X, y, f_start, rule, self.mode_, self.eta, int(self.n_rounds), {"seed": self.random_state}
        )
        return self

    def _direction(self, model, X, f):
        if isinstance(model, TreeEnsemble):
            return model.predict(np.column_stack([X, f]))
        return eval_B(self.mode_.hclass, X, f) @ model

    def staged_predict(self, X, f0=None):
        """Yield predictions after 0, 1, ..., ``n_rounds`` rounds."""
        check_is_fitted(self, "trace_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        f = self._initial(X, f0)
        yhat = None
        if isinstance(self.rule_, dyn.Hybrid):
            if self.strong_model_ is None:
                raise ContractError("test-time hybrid predictions need a fitted strong_model")
            yhat = self.strong_model_.predict(X)
        eta = float(self.eta)
        yield f
        for rec, model in zip(self.trace_.rounds[:-1], self.trace_.models):
            u = self._direction(model, X, f)
            if yhat is not None:
                f = f + eta * (u + self.rule_.gamma_mix * (yhat - f))
            else:
                f = rec.weight_used * (f + eta * u)
            yield f

    def predict(self, X, f0=None):
        f = None
        for f in self.staged_predict(X, f0):
            pass
        return f

    def staged_diagnostics(self, X, y, f0=None):
        """Per-round MSE and multicalibration error on ``(X, y)``.

        ``B`` on new rows is the hypothesis class evaluated at the new
        predictions (exact oracle) or the per-tree outputs of that round's
        fitted ensemble on ``[X | f_t]`` (tree oracle; the final state uses a
        probe ensemble fitted after the last round).
        """
        y = np.asarray(y, dtype=np.float64)
        X = check_array(X, dtype=np.float64)
        models = list(self.trace_.models) + [self.trace_.probe_model]
        out = {"mse": [], "mce_l2": [], "mce_linf": []}
        for f, model in zip(self.staged_predict(X, f0), models):
            r = y - f
            if isinstance(model, TreeEnsemble):
                B = model.tree_outputs(np.column_stack([X, f]))
            else:
                B = eval_B(self.mode_.hclass, X, f)
            e = B.T @ r / len(y)
            out["mse"].append(float(np.mean(r * r)))
            out["mce_l2"].append(float(np.linalg.norm(e)))
            out["mce_linf"].append(float(np.max(np.abs(e))) if e.size else 0.0)
        return {k: np.array(v) for k, v in out.items()}
