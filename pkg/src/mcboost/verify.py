"""Check recorded traces against the convergence guarantees of the dynamics.

:func:`check_trace` decides which checks apply from the oracle mode, the rule
family and the weights actually recorded, evaluates each one on every round,
and reports the worst violation (``<= 0`` means satisfied). Identities that
rely on an exact orthogonal projection are marked not-applicable on
boosted-tree traces.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics, numlin
from ._validation import as_matrix, as_vector, check_eta
from .dynamics import BoostedTrees, ExactProjection, Trace, schedule_from_dict
from .exceptions import ContractError, NumericFailure
from .hypotheses import eval_B

_EPS = np.finfo(np.float64).eps
IDENTITY_TOL = 1e-9
INEQUALITY_TOL = 1e-12
MONOTONE_TOL_EXACT = 1e-12
MONOTONE_TOL_TREES = 0.0
RATE_TOL = 1e-9
QUADRATIC_REGIME = (1e-6, 1e-2)

PASS, FAIL, NA = "pass", "fail", "not-applicable"


@dataclass
class Check:
    name: str
    theorem_ref: str
    status: str
    worst_violation: float
    detail: str
    worst_round: int = None

    def to_dict(self):
        d = asdict(self)
        if d["worst_violation"] is not None and not math.isfinite(d["worst_violation"]):
            d["worst_violation"] = None
        return d


@dataclass
class VerificationReport:
    checks: list
    overall: str
    trends: dict = field(default_factory=dict)

    def by_name(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"overall": self.overall, "checks": [c.to_dict() for c in self.checks], "trends": self.trends}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def to_text(self):
        w = max(len(c.name) for c in self.checks) if self.checks else 4
        lines = [f"{'check':<{w}}  {'status':<14}  {'worst':>12}  detail"]
        for c in self.checks:
            worst = "" if c.worst_violation is None else f"{c.worst_violation:12.4e}"
            lines.append(f"{c.name:<{w}}  {c.status:<14}  {worst:>12}  {c.detail}")
        for k, v in self.trends.items():
            lines.append(f"trend {k} = {v}")
        lines.append(f"overall: {self.overall}")
        return "\n".join(lines) + "\n"


def _na(name, ref, why):
    return Check(name, ref, NA, None, why)


def _judge(name, ref, violations, what, first_round=0):
    """``violations[i] = lhs - rhs - tol`` for round ``first_round + i``; passes when all are <= 0."""
    v = np.asarray(violations, dtype=np.float64)
    if v.size == 0:
        return _na(name, ref, f"no rounds to evaluate for {what}")
    i = int(np.argmax(v))
    t = first_round + i
    worst = float(v[i])
    status = PASS if worst <= 0 else FAIL
    where = f"worst at round {t}" if status == FAIL else f"max slack used at round {t}"
    return Check(name, ref, status, worst, f"{what}; {where}", t)


class _ExactCache:
    """Per-round B(f_t) and column bases, evaluated lazily from the embedded design matrix."""

    def __init__(self, trace, mode):
        self.trace = trace
        self.mode = mode
        self._B = {}
        self._Q = {}

    def B(self, t):
        if t not in self._B:
            self._B[t] = eval_B(self.mode.hclass, self.trace.X, self.trace.rounds[t].f)
        return self._B[t]

    def Q(self, t):
        if t not in self._Q:
            self._Q[t] = numlin.column_basis(self.B(t), self.mode.rank_tol)
        return self._Q[t]


def _family(trace):
    kind = trace.config["rule"]["kind"]
    weights = [r.weight_used for r in trace.rounds[:-1]]
    if kind == "hybrid":
        return "hybrid"
    if kind == "adaptive":
        return "adaptive"
    if all(w == 1.0 for w in weights):
        return "unit"
    if kind == "relaxed":
        return "relaxed"
    raise ContractError(f"rule {kind!r} recorded non-unit weights")


def check_trace(trace, rule=None, mode=None, aux=None):
    """Evaluate every applicable invariant on ``trace``.

    ``rule`` and ``mode`` default to the ones stored in the trace config; ``aux``
    may carry ``{"X": design matrix}`` for exact-mode traces saved without it.
    """
    if not isinstance(trace, Trace):
        raise ContractError("check_trace expects a Trace")
    trace.validate()
    if len(trace.rounds) < 2:
        raise ContractError("trace needs at least one completed round")
    mode = mode if mode is not None else trace.mode()
    eta = check_eta(trace.config["eta"])
    if aux and aux.get("X") is not None and trace.X is None:
        trace.X = as_matrix(aux["X"], "X")
    exact = isinstance(mode, ExactProjection)
    if exact and trace.X is None:
        raise ContractError("exact-mode verification needs the design matrix")
    if not exact and not isinstance(mode, BoostedTrees):
        raise ContractError(f"unknown oracle mode {mode!r}")

    y = trace.y
    F = np.array([r.f for r in trace.rounds])
    R = y[None, :] - F
    res = np.linalg.norm(R, axis=1)
    gaps = np.linalg.norm(np.diff(F, axis=0), axis=1)
    weights = np.array([r.weight_used for r in trace.rounds[:-1]], dtype=np.float64)
    n, T = len(y), len(gaps)
    ynorm = float(np.linalg.norm(y))
    r0 = float(res[0])
    cache = _ExactCache(trace, mode) if exact else None
    family = _family(trace)
    tree_why = "identity requires an exact orthogonal projection; trace uses boosted trees"

    checks = [_record_consistency(trace, F, R, gaps, eta, cache)]

    if family in ("unit", "adaptive"):
        tol = MONOTONE_TOL_EXACT if exact else MONOTONE_TOL_TREES
        mse = np.mean(R * R, axis=1)
        checks.append(
            _judge(
                "loss_monotone",
                "training loss non-increasing (unit and adaptive rules)",
                mse[1:] - mse[:-1] * (1.0 + tol),
                "train MSE non-increasing",
                first_round=1,
            )
        )

    if family == "unit":
        bound = metrics.sublinear_bound(eta, r0, T)
        checks.append(
            _judge(
                "sublinear_rate",
                "min gap <= sqrt(eta)||y-f0||/sqrt(T)",
                [gaps.min() - bound * (1.0 + RATE_TOL)],
                f"min gap {gaps.min():.6g} vs bound {bound:.6g}",
            )
        )
        if exact:
            dV = 0.5 * (res[:-1] ** 2 - res[1:] ** 2)
            pred = (1.0 / eta) * (1.0 - eta / 2.0) * gaps**2
            scale = 1.0 + 0.5 * res[:-1] ** 2
            checks.append(
                _judge(
                    "lyapunov_decrement",
                    "V_t - V_{t+1} = (1/eta)(1 - eta/2) gap_t^2",
                    np.abs(dV - pred) - IDENTITY_TOL * scale,
                    "Lyapunov decrement identity",
                )
            )
            checks.append(_mce_bound_check(cache, R, gaps, eta, n))
            checks.append(_linear_contraction_check(cache, gaps, eta, r0))
        else:
            for name in ("lyapunov_decrement", "mce_bound", "linear_contraction"):
                checks.append(_na(name, "exact-oracle guarantee", tree_why))

    if family == "relaxed":
        checks.extend(_relaxed_checks(trace, cache, F, R, res, gaps, weights, eta, ynorm, r0, exact, tree_why))

    trends = {}
    if family == "adaptive":
        checks.extend(_adaptive_checks(trace, res, weights, eta, ynorm, exact))
        w_last = weights[-1]
        trends["abs_omega_last_minus_1"] = float(abs(w_last - 1.0))
        align = np.abs([r.alignment for r in trace.rounds if r.alignment is not None])
        trends["alignment_nondecreasing"] = bool(np.all(np.diff(align) >= -1e-12 * (1.0 + align[:-1])))

    if family == "hybrid":
        checks.extend(_hybrid_checks(trace, cache, F, R, res, gaps, eta, exact, tree_why))

    applicable = [c for c in checks if c.status != NA]
    overall = FAIL if any(c.status == FAIL for c in applicable) else PASS
    return VerificationReport(checks, overall, trends)


def _record_consistency(trace, F, R, gaps, eta, cache):
    per_round = []
    for t, rec in enumerate(trace.rounds):
        pairs = [(rec.train_mse, float(np.mean(R[t] ** 2))), (rec.lyapunov, 0.5 * float(R[t] @ R[t]))]
        if t < len(gaps):
            pairs.append((rec.gap, float(gaps[t])))
        if cache is not None:
            pairs.append((rec.mce_l2, float(np.linalg.norm(cache.B(t).T @ R[t])) / len(trace.y)))
        worst = -math.inf
        for stored, actual in pairs:
            if stored is None or not math.isfinite(stored):
                worst = math.inf
            else:
                worst = max(worst, abs(stored - actual) - IDENTITY_TOL * (1.0 + abs(actual)))
        per_round.append(worst)
    return _judge(
        "record_consistency",
        "recorded scalars agree with recorded predictions",
        per_round,
        "stored MSE / Lyapunov / gap / MCE match recomputation",
    )


def _mce_bound_check(cache, R, gaps, eta, n):
    viol = []
    for t in range(len(gaps)):
        B = cache.B(t)
        normB = numlin.spectral_norm(B)
        e = float(np.linalg.norm(B.T @ R[t])) / n
        bound = metrics.mce_upper_bound(normB, gaps[t], n, eta)
        slack = INEQUALITY_TOL * (1.0 + normB * float(np.linalg.norm(R[t])) / n)
        viol.append(e - bound - slack)
    return _judge(
        "mce_bound",
        "||E_hat(f_t)|| <= ||B(f_t)|| gap_t / (n eta)",
        viol,
        "empirical MCE bounded by the update step",
    )


def _linear_contraction_check(cache, gaps, eta, r0):
    ref = "gap_{t+1} <= (1 - eta + eta L_A ||y-f0||) gap_t"
    if len(gaps) < 2:
        return _na("linear_contraction", ref, "needs at least two gaps")
    F = [r.f for r in cache.trace.rounds]
    L_A = 0.0
    for t in range(1, len(gaps)):
        d = float(np.linalg.norm(F[t] - F[t - 1]))
        if d > 0:
            L_A = max(L_A, numlin.projector_distance(cache.Q(t), cache.Q(t - 1)) / d)
    kappa = metrics.linear_kappa(eta, L_A, r0)
    viol = [gaps[t] - kappa * gaps[t - 1] - RATE_TOL * gaps[t - 1] - INEQUALITY_TOL for t in range(1, len(gaps))]
    return _judge("linear_contraction", ref, viol, f"kappa={kappa:.6g} with measured L_A={L_A:.6g}", 1)


def _relaxed_checks(trace, cache, F, R, res, gaps, weights, eta, ynorm, r0, exact, tree_why):
    out = []
    rho_t = np.concatenate([[1.0], np.cumprod(weights)])
    env = rho_t * r0 + (1.0 - rho_t) * ynorm
    out.append(
        _judge(
            "relaxed_loss_envelope",
            "||y-f_t|| <= rho_t ||y-f0|| + (1-rho_t)||y||",
            res - env - IDENTITY_TOL * (1.0 + r0 + ynorm),
            "residual inside the relaxed envelope",
        )
    )
    schedule = schedule_from_dict(trace.config["rule"]["schedule"])
    consts = metrics.relaxed_constants(schedule, eta=eta, y=trace.y, f0=F[0])
    bound = metrics.relaxed_rate_bound(eta, r0, consts.gamma, len(gaps))
    out.append(
        _judge(
            "relaxed_rate",
            "min gap <= (sqrt(eta)||y-f0|| + gamma)/sqrt(T)",
            [gaps.min() - bound * (1.0 + RATE_TOL)],
            f"min gap {gaps.min():.6g} vs bound {bound:.6g} (gamma={consts.gamma:.6g})",
        )
    )
    if not exact:
        out.append(_na("relaxed_lyapunov_decrement", "relaxed Lyapunov identity", tree_why))
        out.append(_na("relaxed_mce_identity", "relaxed MCE identity", tree_why))
        return out
    viol_v, viol_m = [], []
    n = len(trace.y)
    for t, w in enumerate(weights):
        f, fn = F[t], F[t + 1]
        Ar = (fn - w * f) / (w * eta)
        lhs = 0.5 * (res[t] ** 2 - res[t + 1] ** 2) + (1.0 - w) * float(f @ R[t + 1])
        rhs = w * eta * (1.0 - w * eta / 2.0) * float(Ar @ Ar) + 0.5 * (1.0 - w) ** 2 * float(f @ f)
        scale = 1.0 + res[t] ** 2 + float(f @ f) + float(fn @ fn)
        viol_v.append(abs(lhs - rhs) - IDENTITY_TOL * scale)
        B = cache.B(t)
        e = B.T @ R[t] / n
        pred = ((1.0 - w) * (B.T @ f) + B.T @ (fn - f)) / (eta * w * n)
        sc = 1.0 + numlin.spectral_norm(B) * (np.linalg.norm(f) + np.linalg.norm(fn)) / (eta * w * n)
        viol_m.append(float(np.max(np.abs(e - pred))) - IDENTITY_TOL * sc)
    out.append(
        _judge(
            "relaxed_lyapunov_decrement",
            "V_t - V_{t+1} + (1-w_t) f_t.r_{t+1} = w eta (1 - w eta/2)||A r||^2 + (1-w)^2||f_t||^2/2",
            viol_v,
            "relaxed Lyapunov identity",
        )
    )
    out.append(
        _judge(
            "relaxed_mce_identity",
            "E_hat(f_t) = ((1-w)B^T f_t + B^T(f_{t+1}-f_t)) / (eta w n)",
            viol_m,
            "relaxed MCE identity, entrywise",
        )
    )
    return out


def _adaptive_checks(trace, res, weights, eta, ynorm, exact):
    out = []
    if exact:
        out.append(
            _judge(
                "adaptive_nonneg_weight",
                "adaptive weight omega_t >= 0 for t >= 1",
                -weights[1:] - INEQUALITY_TOL,
                "adaptive weights nonnegative",
                first_round=1,
            )
        )
    else:
        out.append(_na("adaptive_nonneg_weight", "adaptive weight omega_t >= 0", "proved for the exact oracle only"))
    ref = "||r_{t+1}|| <= C ||r_t||^2 once ||r_t|| <= 0.01||y||"
    if not exact or eta != 1.0:
        out.append(_na("adaptive_quadratic", ref, "stated for the exact oracle with eta = 1"))
        return out
    out.append(quadratic_rate_check(res, ynorm))
    return out


def quadratic_rate_check(res, ynorm):
    """Quadratic decay from the first round inside the small-residual regime.

    ``C = 1 / (0.01 ||y||)`` is the largest constant for which the quadratic
    inequality still forces contraction everywhere in the regime, so a residual
    that stalls inside the regime fails. A roundoff floor ``1e3 eps ||y||`` is
    added to every right-hand side.
    """
    ref = "||r_{t+1}|| <= C ||r_t||^2 once ||r_t|| <= 0.01||y||"
    lo, hi = QUADRATIC_REGIME
    res = np.asarray(res, dtype=np.float64)
    inside = np.flatnonzero((res <= hi * ynorm) & (res >= lo * ynorm))
    if inside.size == 0 or inside[0] >= len(res) - 1:
        return _na("adaptive_quadratic", ref, "residual never entered the small-residual regime")
    start = int(inside[0])
    C = 1.0 / (hi * ynorm)
    floor = 1e3 * _EPS * ynorm
    viol = res[start + 1 :] - C * res[start:-1] ** 2 - floor
    return _judge("adaptive_quadratic", ref, viol, f"C={C:.6g}, from round {start}, {len(viol)} rounds", start + 1)


def _hybrid_checks(trace, cache, F, R, res, gaps, eta, exact, tree_why):
    out = []
    gamma = float(trace.config["rule"]["gamma_mix"])
    yhat = trace.strong_pred
    ref = "||y-f_{t+1}|| <= kappa ||y-f_t|| + eta gamma ||y-y_hat|| (hybrid shrinkage)"
    if not exact:
        out.append(_na("hybrid_contraction", ref, tree_why))
        out.append(_na("hybrid_mce_identity", "hybrid MCE identity", tree_why))
        return out
    if not (0.0 < eta < metrics.hybrid_eta_limit(gamma)):
        out.append(_na("hybrid_contraction", ref, f"eta={eta} outside the guaranteed range"))
    else:
        kappa = metrics.hybrid_kappa(eta, gamma)
        off = eta * gamma * float(np.linalg.norm(trace.y - yhat))
        viol = res[1:] - kappa * res[:-1] - off - INEQUALITY_TOL * (1.0 + res[:-1])
        out.append(_judge("hybrid_contraction", ref, viol, f"kappa={kappa:.6g}, offset={off:.6g}", 1))
    n = len(trace.y)
    viol = []
    for t in range(len(gaps)):
        B = cache.B(t)
        e = B.T @ R[t] / n
        pred = B.T @ (F[t + 1] - F[t]) / (eta * n) + gamma * (B.T @ (F[t] - yhat)) / n
        sc = 1.0 + numlin.spectral_norm(B) * (
            np.linalg.norm(F[t + 1] - F[t]) / eta + gamma * np.linalg.norm(F[t] - yhat)
        ) / n
        viol.append(float(np.max(np.abs(e - pred))) - IDENTITY_TOL * sc)
    out.append(
        _judge(
            "hybrid_mce_identity",
            "E_hat(f_t) = B^T(f_{t+1}-f_t)/(eta n) + gamma B^T(f_t - y_hat)/n",
            viol,
            "hybrid MCE identity, entrywise",
        )
    )
    return out


# --- standalone linear-algebra checks -----------------------------------------


def penrose_check(M, Mp):
    """Largest of the four Penrose-condition residuals (max-entry norm)."""
    return max(numlin.penrose_residuals(M, Mp))


def eigen_lemma_spectrum(A, v, eta):
    """Predicted spectrum of ``eta A + (I - eta A) v v^T`` (sorted ascending).

    With ``k = rank(A)`` and ``a = ||(I - A) v||^2`` the eigenvalues are
    ``1`` and ``eta * a`` once each, ``eta`` with multiplicity ``k - 1`` and
    ``0`` with multiplicity ``n - 1 - k``; for ``k = 0`` the list is ``1, 0 x
    (n-1)`` and for ``k = n`` it is ``1, eta x (n-1)``.
    """
    A = as_matrix(A, "A")
    v = as_vector(v, "v")
    n = A.shape[0]
    k = int(round(float(np.trace(A))))
    a = float(np.sum((v - A @ v) ** 2))
    if k == 0:
        vals = [1.0] + [0.0] * (n - 1)
    elif k == n:
        vals = [1.0] + [eta] * (n - 1)
    else:
        vals = [1.0, eta * a] + [eta] * (k - 1) + [0.0] * (n - 1 - k)
    return np.sort(np.array(vals))


def eigen_lemma_check(A, v, eta):
    """Max deviation between the numeric and predicted spectra of ``eta A + (I - eta A) v v^T``."""
    A = as_matrix(A, "A")
    v = as_vector(v, "v")
    n = A.shape[0]
    if A.shape != (n, n) or len(v) != n:
        raise ContractError(f"A must be square and match v: {A.shape} vs {len(v)}")
    scale = 1.0 + float(np.max(np.abs(A)))
    if np.max(np.abs(A - A.T)) > 1e-9 * scale or np.max(np.abs(A @ A - A)) > 1e-9 * scale:
        raise ContractError("A must be a symmetric idempotent matrix")
    if abs(float(np.linalg.norm(v)) - 1.0) > 1e-9:
        raise ContractError("v must have unit norm")
    eta = check_eta(eta)
    M = eta * A + (np.eye(n) - eta * A) @ np.outer(v, v)
    ev = np.linalg.eigvals(M)
    if np.max(np.abs(ev.imag)) > 1e-8:
        raise NumericFailure("spectrum has a non-negligible imaginary part")
    ev = np.sort(ev.real)
    if ev[0] < -1e-9:
        raise NumericFailure(f"smallest eigenvalue {ev[0]} is negative")
    return float(np.max(np.abs(ev - eigen_lemma_spectrum(A, v, eta))))
