"""Scalar diagnostics, theoretical bounds and rate constants."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import as_matrix, as_vector, check_eta, check_same_length
from .exceptions import ContractError

_EPS = np.finfo(np.float64).eps


def empirical_mce(B, y, f):
    """Empirical multicalibration error ``B^T (y - f) / n``."""
    B = as_matrix(B, "B")
    y = as_vector(y, "y")
    f = as_vector(f, "f")
    check_same_length(("B.rows", B), ("y", y), ("f", f))
    return B.T @ (y - f) / len(y)


def mce_upper_bound(B_norm, gap, n, eta):
    """``||B||_2 * gap / (n * eta)``: bounds ``||E_hat(f_t)||_2`` under the unit rule."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if eta <= 0:
        raise ContractError(f"eta must be positive, got {eta}")
    return float(B_norm) * float(gap) / (n * float(eta))


def sublinear_bound(eta, init_res_norm, T):
    """Bound on the smallest gap over ``T`` unit-rule rounds."""
    if int(T) < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    eta = check_eta(eta)
    return math.sqrt(eta) * float(init_res_norm) / math.sqrt(T)


def linear_kappa(eta, L_A, init_res_norm):
    """Per-round gap contraction factor ``1 - eta + eta * L_A * ||y - f0||``."""
    eta = check_eta(eta)
    if L_A < 0:
        raise ContractError(f"L_A must be nonnegative, got {L_A}")
    return 1.0 - eta + eta * float(L_A) * float(init_res_norm)


def hybrid_eta_limit(gamma_mix):
    """Largest step for which :func:`hybrid_kappa` is below one (exclusive)."""
    if gamma_mix <= 0:
        raise ContractError(f"gamma_mix must be positive, got {gamma_mix}")
    return gamma_mix / (1.0 + gamma_mix) ** 2


def hybrid_kappa(eta, gamma_mix):
    """Shrinkage factor of the hybrid (weak + strong learner) update.

    ``sqrt(1 - 2 g eta (1 - (1+g)^2 eta / g))``. The factor is below one only
    for ``0 < eta < g / (1+g)^2``; steps at or beyond that limit are rejected.
    """
    limit = hybrid_eta_limit(gamma_mix)
    if not (0.0 < eta < limit):
        raise ContractError(
            f"eta={eta} is outside (0, gamma/(1+gamma)^2) = (0, {limit:.6g}) where the "
            "hybrid shrinkage factor is below one"
        )
    g = float(gamma_mix)
    return math.sqrt(1.0 - 2.0 * g * eta * (1.0 - (1.0 + g) ** 2 / g * eta))


def mse(y, f):
    y = as_vector(y, "y")
    f = as_vector(f, "f")
    check_same_length(("y", y), ("f", f))
    return float(np.mean((y - f) ** 2))


def lyapunov(y, f):
    """``V(f) = ||y - f||^2 / 2``."""
    y = as_vector(y, "y")
    f = as_vector(f, "f")
    check_same_length(("y", y), ("f", f))
    return 0.5 * float(np.dot(y - f, y - f))


# --- relaxed-rule constants -------------------------------------------------


@dataclass(frozen=True)
class RelaxedConstants:
    C_w: float
    C_w_sq: float
    rho: float
    rho_tilde: float
    gamma: float

    def to_dict(self):
        return asdict(self)


def _schedule_deficits(schedule, horizon):
    t = np.arange(int(horizon))
    try:
        w = np.asarray(schedule(t), dtype=np.float64)
        if w.shape != t.shape:
            raise TypeError
    except (TypeError, ValueError):
        w = np.array([schedule(int(s)) for s in t], dtype=np.float64)
    if np.any(~np.isfinite(w)) or np.any(w <= 0) or np.any(w > 1):
        bad = int(np.flatnonzero(~((w > 0) & (w <= 1)))[0])
        raise ContractError(f"schedule value w_{bad} = {w[bad]} is outside (0, 1]")
    return 1.0 - w


def relaxed_constants(schedule, horizon=1_000_000, eta=1.0, y=None, f0=None):
    """Series constants and the rate offset ``gamma`` of the relaxed rule.

    ``C_w = sum (1 - w_t)`` and ``C_w_sq = sum (1 - w_t)^2`` are truncated at
    ``horizon`` terms; for a power-law schedule ``w_t = 1 - (t+a)^-p`` the
    integral tail beyond the horizon is added. ``gamma`` uses ``rho_tilde**2``
    so that both terms under the square root carry squared units.
    """
    if int(horizon) < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    eta = check_eta(eta)
    y = as_vector(y, "y")
    f0 = as_vector(f0, "f0")
    check_same_length(("y", y), ("f0", f0))

    d = _schedule_deficits(schedule, horizon)
    C_w = float(np.sum(d))
    C_w_sq = float(np.sum(d * d))
    tail = getattr(schedule, "tail_sums", None)
    if tail is not None:
        t1, t2 = tail(int(horizon))
        C_w += t1
        C_w_sq += t2

    ny = float(np.linalg.norm(y))
    nr = float(np.linalg.norm(y - f0))
    rho = max(2.0 * ny**2, (ny + nr) * nr)
    rho_tilde = ny + max(nr, ny)
    if C_w == 0.0 and C_w_sq == 0.0:
        gamma = 0.0
    else:
        a = 2.0 * eta * rho * C_w
        b = rho_tilde**2 * C_w_sq
        gamma = math.sqrt(a + 2.0 * math.sqrt(nr**2 + a) * math.sqrt(b) + b)
    return RelaxedConstants(C_w, C_w_sq, rho, rho_tilde, gamma)


def relaxed_rate_bound(eta, init_res_norm, gamma, T):
    """``(sqrt(eta) ||y - f0|| + gamma) / sqrt(T)``."""
    if int(T) < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    return (math.sqrt(eta) * init_res_norm + gamma) / math.sqrt(T)


# --- rate fitting -----------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    kappa_hat: float
    fit_window: tuple

    def to_dict(self):
        d = asdict(self)
        d["fit_window"] = list(self.fit_window)
        return d


def default_window(gaps, y_norm, burn_in=2):
    """Rounds ``[burn_in, end)`` with ``end`` at the first numerically-zero gap."""
    gaps = np.asarray(gaps, dtype=np.float64)
    floor = 1e3 * _EPS * float(y_norm)
    end = burn_in
    while end < len(gaps) and gaps[end] > floor:
        end += 1
    return (burn_in, end)


def fit_log_linear(gaps, window=None):
    """OLS of ``log(gap_t)`` on ``t`` over ``window = (start, end)`` (end exclusive).

    ``r2`` is 1 by convention when the log-gaps in the window are all equal.
    """
    gaps = np.asarray(gaps, dtype=np.float64)
    if window is None:
        window = (0, len(gaps))
    start, end = int(window[0]), int(window[1])
    if start < 0 or end > len(gaps):
        raise ContractError(f"window {window} exceeds the {len(gaps)} available gaps")
    if end - start < 3:
        raise ContractError(f"fit window {window} has fewer than 3 rounds")
    g = gaps[start:end]
    if np.any(~(g > 0)):
        bad = start + int(np.flatnonzero(~(g > 0))[0])
        raise ContractError(
            f"gap at round {bad} is {gaps[bad]}; log-fit needs positive gaps, shrink the window"
        )
    t = np.arange(start, end, dtype=np.float64)
    z = np.log(g)
    tc = t - t.mean()
    slope = float(np.dot(tc, z - z.mean()) / np.dot(tc, tc))
    intercept = float(z.mean() - slope * t.mean())
    ss_tot = float(np.sum((z - z.mean()) ** 2))
    ss_res = float(np.sum((z - (intercept + slope * t)) ** 2))
    if ss_tot <= 1e-30 * max(1.0, float(np.dot(z, z))):
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RateFit(slope, intercept, r2, math.exp(slope), (start, end))
