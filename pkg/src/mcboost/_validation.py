"""Input validation helpers shared by the numeric modules and estimators."""

import numpy as np

from .exceptions import ContractError


def as_matrix(M, name="M"):
    """Return ``M`` as a finite 2-D float64 array with at least one row and column."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim == 1:
        A = A.reshape(-1, 1)
    if A.ndim != 2:
        raise ContractError(f"{name} must be 2-dimensional, got shape {A.shape}")
    if A.shape[0] < 1 or A.shape[1] < 1:
        raise ContractError(f"{name} must have at least one row and one column, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError(f"{name} contains non-finite entries")
    return A


def as_vector(v, name="v"):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim != 1:
        raise ContractError(f"{name} must be 1-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} contains non-finite entries")
    return a


def check_same_length(*pairs):
    """``pairs`` are ``(name, array)``; raise unless all leading dimensions agree."""
    lengths = {name: len(a) for name, a in pairs}
    if len(set(lengths.values())) > 1:
        desc = ", ".join(f"{k}={v}" for k, v in lengths.items())
        raise ContractError(f"dimension mismatch: {desc}")


def check_eta(eta, upper=1.0):
    eta = float(eta)
    if not (0.0 < eta <= upper):
        raise ContractError(f"eta must lie in (0, {upper}], got {eta}")
    return eta
