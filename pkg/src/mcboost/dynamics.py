"""The boosting dynamical system ``f_{t+1} = w_t (f_t + eta A(f_t)(y - f_t))``.

Two oracle modes realise the per-round update direction ``A(f)(y - f)``:

* :class:`ExactProjection` projects the residual onto the span of an explicit
  factorized hypothesis class evaluated at the current predictions.
* :class:`BoostedTrees` fits a squared-error tree booster to the residual on
  the augmented input ``[X | f]`` (prediction as the last column).

Four update rules choose the rescaling ``w_t``: :class:`Unit` (always 1),
:class:`Relaxed` (a schedule), :class:`Adaptive` (closed-form line search) and
:class:`Hybrid`, which additionally pulls towards a fixed strong predictor.
"""

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics, numlin
from ._validation import as_matrix, as_vector, check_eta, check_same_length
from .exceptions import ContractError, RunAborted
from .hypotheses import FactorizedClass, class_from_config, class_to_config, eval_B
from .weaklearn import TreeEnsemble, gbm_fit, presort

# --- schedules ----------------------------------------------------------------


@dataclass(frozen=True)
class PowerLawSchedule:
    """``w_t = 1 - (t + offset)^(-power)``."""

    offset: float = 2.0
    power: float = 3.0

    def __post_init__(self):
        if self.offset < 1 or self.power <= 1:
            raise ContractError("power-law schedule needs offset >= 1 and power > 1")

    def __call__(self, t):
        return 1.0 - np.power(np.asarray(t, dtype=np.float64) + self.offset, -self.power)

    def tail_sums(self, horizon):
        """Integral tails of ``sum (1-w_t)`` and ``sum (1-w_t)^2`` beyond ``horizon``."""
        a, p = self.offset, self.power
        base = horizon + a
        return base ** (1.0 - p) / (p - 1.0), base ** (1.0 - 2.0 * p) / (2.0 * p - 1.0)

    def to_dict(self):
        return {"kind": "power_law", "offset": self.offset, "power": self.power}


@dataclass(frozen=True)
class ConstantSchedule:
    value: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.value <= 1.0):
            raise ContractError(f"schedule value must lie in (0, 1], got {self.value}")

    def __call__(self, t):
        return np.full(np.shape(t), self.value) if np.ndim(t) else self.value

    def tail_sums(self, horizon):
        if self.value == 1.0:
            return 0.0, 0.0
        return math.inf, math.inf

    def to_dict(self):
        return {"kind": "constant", "value": self.value}


def schedule_from_dict(d):
    kind = d.get("kind")
    if kind == "power_law":
        return PowerLawSchedule(float(d["offset"]), float(d["power"]))
    if kind == "constant":
        return ConstantSchedule(float(d["value"]))
    if kind == "callable":
        raise ContractError(f"schedule {d.get('name')!r} is an arbitrary callable and cannot be rebuilt")
    raise ContractError(f"unknown schedule kind {kind!r}")


def relaxed_default_schedule(t):
    """``1 - (t + 2)^(-3)``."""
    if np.any(np.asarray(t) < 0):
        raise ContractError("schedule index must be >= 0")
    return PowerLawSchedule()(t)


# --- update rules -------------------------------------------------------------


@dataclass(frozen=True)
class Unit:
    def to_dict(self):
        return {"kind": "unit"}


@dataclass(frozen=True)
class Relaxed:
    schedule: object = field(default_factory=PowerLawSchedule)

    def to_dict(self):
        if hasattr(self.schedule, "to_dict"):
            return {"kind": "relaxed", "schedule": self.schedule.to_dict()}
        name = getattr(self.schedule, "__qualname__", type(self.schedule).__name__)
        return {"kind": "relaxed", "schedule": {"kind": "callable", "name": name}}


@dataclass(frozen=True)
class Adaptive:
    def to_dict(self):
        return {"kind": "adaptive"}


@dataclass(frozen=True, eq=False)
class Hybrid:
    """Mix weak-learner updates with a strong predictor ``strong_pred`` (training rows)."""

    gamma_mix: float
    strong_pred: np.ndarray

    def __post_init__(self):
        if not self.gamma_mix > 0:
            raise ContractError(f"gamma_mix must be positive, got {self.gamma_mix}")
        object.__setattr__(self, "strong_pred", as_vector(self.strong_pred, "strong_pred"))

    def to_dict(self):
        return {"kind": "hybrid", "gamma_mix": self.gamma_mix}


def rule_from_dict(d, strong_pred=None):
    kind = d.get("kind")
    if kind == "unit":
        return Unit()
    if kind == "relaxed":
        return Relaxed(schedule_from_dict(d["schedule"]))
    if kind == "adaptive":
        return Adaptive()
    if kind == "hybrid":
        if strong_pred is None:
            raise ContractError("hybrid rule needs the strong predictions")
        return Hybrid(float(d["gamma_mix"]), strong_pred)
    raise ContractError(f"unknown rule kind {kind!r}")


# --- oracle modes -------------------------------------------------------------


@dataclass(frozen=True)
class ExactProjection:
    hclass: FactorizedClass
    rank_tol: float = numlin.DEFAULT_RANK_TOL

    def to_dict(self):
        return {"kind": "exact", "rank_tol": self.rank_tol, "hypothesis_class": class_to_config(self.hclass)}


@dataclass(frozen=True)
class BoostedTrees:
    n_trees: int = 100
    learn_rate: float = 0.1
    max_depth: int = 3
    min_leaf: int = 1

    def __post_init__(self):
        if self.n_trees < 1 or not (0 < self.learn_rate <= 1) or self.max_depth < 0 or self.min_leaf < 1:
            raise ContractError(f"invalid boosted-trees parameters {self}")

    def to_dict(self):
        return {"kind": "trees", **asdict(self)}


def mode_from_dict(d):
    kind = d.get("kind")
    if kind == "exact":
        return ExactProjection(class_from_config(d["hypothesis_class"]), float(d["rank_tol"]))
    if kind == "trees":
        return BoostedTrees(int(d["n_trees"]), float(d["learn_rate"]), int(d["max_depth"]), int(d["min_leaf"]))
    raise ContractError(f"unknown oracle mode {kind!r}")


@dataclass
class OracleFit:
    """One oracle call at predictions ``f``.

    ``direction`` approximates ``A(f)(y - f)``; ``B`` is the evaluation matrix
    used for diagnostics (tree mode: one column per fitted tree); ``model`` is
    the coefficient vector (exact mode) or the tree ensemble (tree mode).
    """

    direction: np.ndarray
    B: np.ndarray
    spectral_B: float
    model: object


def oracle_fit(X, y, f, mode, order=None):
    r = y - f
    if isinstance(mode, ExactProjection):
        B = eval_B(mode.hclass, X, f)
        res = numlin.svd(B, mode.rank_tol)
        k = res.numeric_rank
        Q = res.U[:, :k]
        c = Q.T @ r
        theta = res.Vt[:k].T @ (c / res.singular_values[:k])
        return OracleFit(Q @ c, B, float(res.singular_values[0]), theta)
    if isinstance(mode, BoostedTrees):
        Xa = np.column_stack([X, f])
        if order is not None:
            order = np.column_stack([order, np.argsort(f, kind="stable")])
        ens = gbm_fit(Xa, r, mode.n_trees, mode.learn_rate, mode.max_depth, mode.min_leaf, order=order)
        B = ens.tree_outputs(Xa)
        return OracleFit(ens.train_prediction, B, numlin.spectral_norm(B), ens)
    raise ContractError(f"unknown oracle mode {mode!r}")


def adaptive_weight(y, phi):
    """``y^T phi / ||phi||^2``; 0 when ``phi`` vanishes."""
    y = as_vector(y, "y")
    phi = as_vector(phi, "phi")
    check_same_length(("y", y), ("phi", phi))
    nn = float(np.dot(phi, phi))
    if nn == 0.0:
        return 0.0
    return float(np.dot(y, phi)) / nn


def _check_inputs(X, y, f, rule, eta):
    X = as_matrix(X, "X")
    y = as_vector(y, "y")
    f = as_vector(f, "f")
    check_same_length(("X.rows", X), ("y", y), ("f", f))
    eta = check_eta(eta)
    if isinstance(rule, Hybrid):
        check_same_length(("y", y), ("strong_pred", rule.strong_pred))
    return X, y, f, eta


def _apply(y, f, rule, eta, t, fit):
    if isinstance(rule, Hybrid):
        return f + eta * (fit.direction + rule.gamma_mix * (rule.strong_pred - f)), 1.0
    phi = f + eta * fit.direction
    if isinstance(rule, Unit):
        w = 1.0
    elif isinstance(rule, Relaxed):
        w = float(rule.schedule(t))
        if not (0.0 < w <= 1.0):
            raise ContractError(f"schedule value w_{t} = {w} is outside (0, 1]")
    elif isinstance(rule, Adaptive):
        w = adaptive_weight(y, phi)
    else:
        raise ContractError(f"unknown update rule {rule!r}")
    return w * phi, w


def step(X, y, f, rule, mode, eta=1.0, t=0):
    """One round from predictions ``f``; returns ``(f_next, weight_used)``."""
    X, y, f, eta = _check_inputs(X, y, f, rule, eta)
    fit = oracle_fit(X, y, f, mode)
    return _apply(y, f, rule, eta, t, fit)


def hybrid_step(X, y, f, mode, eta, gamma_mix, strong_pred):
    """``f + eta [A(f)(y - f) + gamma (y_hat - f)]``."""
    rule = Hybrid(gamma_mix, strong_pred)
    X, y, f, eta = _check_inputs(X, y, f, rule, eta)
    if not eta < 2 * metrics.hybrid_eta_limit(gamma_mix):
        warnings.warn(f"eta={eta} is outside the hybrid contraction range", stacklevel=2)
    fit = oracle_fit(X, y, f, mode)
    return _apply(y, f, rule, eta, 0, fit)[0]


def _is_projector(A, tol=1e-9):
    scale = 1.0 + float(np.max(np.abs(A)))
    return np.max(np.abs(A - A.T)) <= tol * scale and np.max(np.abs(A @ A - A)) <= tol * scale


def residual_recurrence(y, A, r):
    """Next residual of the adaptive rule with ``eta = 1`` as a function of ``r``.

    With ``q = (I - A) r`` and ``phi = y - q`` (the un-rescaled candidate)::

        r_next = ((y . phi) q - (phi . q) y) / ||phi||^2
    """
    y = as_vector(y, "y")
    r = as_vector(r, "r")
    A = as_matrix(A, "A")
    if A.shape != (len(y), len(y)):
        raise ContractError(f"A has shape {A.shape}, expected {(len(y), len(y))}")
    check_same_length(("y", y), ("r", r))
    if not _is_projector(A):
        raise ContractError("A must be a symmetric idempotent matrix")
    q = r - A @ r
    phi = y - q
    den = float(np.dot(phi, phi))
    if den == 0.0:
        raise ContractError("degenerate geometry: y - (I - A) r is zero")
    return (float(np.dot(y, phi)) * q - float(np.dot(phi, q)) * y) / den


# --- traces -------------------------------------------------------------------


@dataclass
class RoundRecord:
    """State ``t`` and the step leaving it (``gap``/``weight_used`` are None at the last state)."""

    t: int
    f: np.ndarray
    weight_used: float
    gap: float
    train_mse: float
    mce_l2: float
    mce_linf: float
    lyapunov: float
    mce_bound: float
    spectral_B: float
    alignment: float = None

    SCALARS = (
        "weight_used",
        "gap",
        "train_mse",
        "mce_l2",
        "mce_linf",
        "lyapunov",
        "mce_bound",
        "spectral_B",
        "alignment",
    )

    def to_dict(self):
        d = {"t": self.t, "f": self.f.tolist()}
        d.update({k: getattr(self, k) for k in self.SCALARS})
        return d

    @classmethod
    def from_dict(cls, d):
        vals = {k: (None if d.get(k) is None else float(d[k])) for k in cls.SCALARS}
        return cls(t=int(d["t"]), f=np.asarray(d["f"], dtype=np.float64), **vals)


@dataclass
class Trace:
    config: dict
    y: np.ndarray
    rounds: list
    X: np.ndarray = None
    strong_pred: np.ndarray = None
    models: list = field(default_factory=list, repr=False, compare=False)
    probe_model: object = field(default=None, repr=False, compare=False)

    @property
    def terminal_f(self):
        return self.rounds[-1].f

    @property
    def T(self):
        return len(self.rounds) - 1

    def series(self, name):
        return [getattr(r, name) for r in self.rounds]

    def rule(self):
        return rule_from_dict(self.config["rule"], self.strong_pred)

    def mode(self):
        return mode_from_dict(self.config["mode"])

    def to_dict(self, include_models=False):
        d = {
            "config": self.config,
            "y": self.y.tolist(),
            "rounds": [r.to_dict() for r in self.rounds],
            "terminal_f": self.terminal_f.tolist(),
        }
        if self.X is not None:
            d["X"] = self.X.tolist()
        if self.strong_pred is not None:
            d["strong_pred"] = self.strong_pred.tolist()
        if include_models:
            d["models"] = [_model_to_json(m) for m in self.models]
        return d

    def to_json(self, include_models=False):
        return json.dumps(self.to_dict(include_models), allow_nan=False)

    @classmethod
    def from_dict(cls, d):
        try:
            rounds = [RoundRecord.from_dict(r) for r in d["rounds"]]
            X = None if d.get("X") is None else np.asarray(d["X"], dtype=np.float64)
            sp = None if d.get("strong_pred") is None else np.asarray(d["strong_pred"], dtype=np.float64)
            trace = cls(d["config"], np.asarray(d["y"], dtype=np.float64), rounds, X, sp)
            if "models" in d:
                trace.models = [_model_from_json(m) for m in d["models"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed trace: {exc!r}") from None
        trace.validate()
        return trace

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ContractError(f"malformed trace JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ContractError("malformed trace: top level is not an object")
        return cls.from_dict(d)

    def validate(self):
        if not self.rounds:
            raise ContractError("trace has no rounds")
        n = len(self.y)
        for i, r in enumerate(self.rounds):
            if r.t != i:
                raise ContractError(f"round indices are not consecutive at position {i} (t={r.t})")
            if r.f.shape != (n,):
                raise ContractError(f"round {i} predictions have shape {r.f.shape}, expected ({n},)")
            last = i == len(self.rounds) - 1
            if not last and (r.gap is None or r.weight_used is None):
                raise ContractError(f"round {i} is missing its gap or weight")
            if r.gap is not None and r.gap < 0:
                raise ContractError(f"round {i} has a negative gap")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t",) + RoundRecord.SCALARS)
        for r in self.rounds:
            w.writerow([r.t] + ["" if getattr(r, k) is None else repr(getattr(r, k)) for k in RoundRecord.SCALARS])
        return buf.getvalue()


def _model_to_json(m):
    if isinstance(m, TreeEnsemble):
        return {"ensemble": m.to_dict()}
    return {"theta": np.asarray(m).tolist()}


def _model_from_json(d):
    if "ensemble" in d:
        return TreeEnsemble.from_dict(d["ensemble"])
    return np.asarray(d["theta"], dtype=np.float64)


def _record(t, y, f, fit, eta, weight, f_next, rule):
    r = y - f
    n = len(y)
    mce = fit.B.T @ r / n
    gap = None if f_next is None else float(np.linalg.norm(f_next - f))
    bound = None
    if gap is not None and weight == 1.0 and not isinstance(rule, Hybrid):
        bound = metrics.mce_upper_bound(fit.spectral_B, gap, n, eta)
    alignment = None
    if isinstance(rule, Adaptive):
        phi = f + eta * fit.direction
        nphi = float(np.linalg.norm(phi))
        alignment = float(np.dot(y, phi)) / nphi if nphi > 0 else 0.0
    return RoundRecord(
        t=t,
        f=f.copy(),
        weight_used=None if f_next is None else float(weight),
        gap=gap,
        train_mse=float(np.mean(r * r)),
        mce_l2=float(np.linalg.norm(mce)),
        mce_linf=float(np.max(np.abs(mce))) if mce.size else 0.0,
        lyapunov=0.5 * float(np.dot(r, r)),
        mce_bound=bound,
        spectral_B=float(fit.spectral_B),
        alignment=alignment,
    )


def run(X, y, f0, rule, mode, eta=1.0, T=20, extra_config=None):
    """Apply ``T`` rounds from ``f0`` and record every state.

    The returned trace has ``T + 1`` records. In exact mode the design matrix is
    embedded so that verification can re-evaluate ``B(f_t)``. A failure in any
    round raises :class:`RunAborted` carrying the partial trace.
    """
    X, y, f0, eta = _check_inputs(X, y, f0, rule, eta)
    if int(T) < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if not isinstance(mode, (ExactProjection, BoostedTrees)):
        raise ContractError(f"unknown oracle mode {mode!r}")
    config = {"rule": rule.to_dict(), "mode": mode.to_dict(), "eta": eta, "T": int(T), "n": len(y)}
    if extra_config:
        config.update(extra_config)
    trace = Trace(
        config,
        y.copy(),
        [],
        X=X.copy() if isinstance(mode, ExactProjection) else None,
        strong_pred=rule.strong_pred.copy() if isinstance(rule, Hybrid) else None,
    )
    order = presort(X) if isinstance(mode, BoostedTrees) else None
    f = f0.copy()
    t = 0
    try:
        for t in range(int(T)):
            fit = oracle_fit(X, y, f, mode, order)
            f_next, w = _apply(y, f, rule, eta, t, fit)
            if not np.all(np.isfinite(f_next)):
                raise ContractError(f"non-finite predictions after round {t}")
            trace.rounds.append(_record(t, y, f, fit, eta, w, f_next, rule))
            trace.models.append(fit.model)
            f = f_next
        t = int(T)
        probe = oracle_fit(X, y, f, mode, order)
        trace.rounds.append(_record(t, y, f, probe, eta, None, None, rule))
        trace.probe_model = probe.model
    except Exception as exc:
        raise RunAborted(f"run aborted at round {t}: {exc}", trace) from exc
    return trace
