"""Dense linear algebra kernel: SVD, pseudoinverse, min-norm least squares, projection.

Everything routes through :func:`svd`, which wraps LAPACK (``numpy.linalg.svd``)
and applies a relative rank cutoff. Singular values ``<= rank_tol * sigma_1``
are treated as zero throughout.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, as_vector, check_same_length
from .exceptions import ContractError, NumericFailure

DEFAULT_RANK_TOL = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``M = U @ diag(singular_values) @ Vt``."""

    U: np.ndarray
    singular_values: np.ndarray
    Vt: np.ndarray
    numeric_rank: int

    def reconstruct(self):
        return (self.U * self.singular_values) @ self.Vt


def _numeric_rank(s, rank_tol):
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rank_tol * s[0]))


def svd(M, rank_tol=DEFAULT_RANK_TOL):
    M = as_matrix(M, "M")
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        # gesdd occasionally fails where the QR-iteration driver succeeds
        try:
            import scipy.linalg

            U, s, Vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc2:
            raise NumericFailure(f"SVD did not converge for a {M.shape} matrix") from exc2
        if not np.all(np.isfinite(s)):
            raise NumericFailure("SVD produced non-finite singular values") from exc
    return SvdResult(U=U, singular_values=s, Vt=Vt, numeric_rank=_numeric_rank(s, rank_tol))


def pinv(M, rank_tol=DEFAULT_RANK_TOL):
    """Moore-Penrose pseudoinverse with relative singular-value cutoff."""
    res = svd(M, rank_tol)
    k = res.numeric_rank
    if k == 0:
        return np.zeros((res.Vt.shape[1], res.U.shape[0]))
    with np.errstate(over="ignore", invalid="ignore"):
        Mp = (res.Vt[:k].T / res.singular_values[:k]) @ res.U[:, :k].T
    if not np.all(np.isfinite(Mp)):
        raise NumericFailure("pseudoinverse overflows; singular values are too small to invert")
    return Mp


def min_norm_lsq(B, r, rank_tol=DEFAULT_RANK_TOL):
    """Minimum-norm minimiser of ``||r - B theta||_2``, i.e. ``pinv(B) @ r``."""
    B = as_matrix(B, "B")
    r = as_vector(r, "r")
    check_same_length(("B.rows", B), ("r", r))
    res = svd(B, rank_tol)
    k = res.numeric_rank
    if k == 0:
        return np.zeros(B.shape[1])
    coef = (res.U[:, :k].T @ r) / res.singular_values[:k]
    return res.Vt[:k].T @ coef


def column_basis(B, rank_tol=DEFAULT_RANK_TOL):
    """Orthonormal basis (n x rank) for the column space of ``B``."""
    res = svd(B, rank_tol)
    return res.U[:, : res.numeric_rank]


def projector_apply(B, r, rank_tol=DEFAULT_RANK_TOL):
    """Orthogonal projection of ``r`` onto col(B): ``B @ pinv(B) @ r``."""
    B = as_matrix(B, "B")
    r = as_vector(r, "r")
    check_same_length(("B.rows", B), ("r", r))
    Q = column_basis(B, rank_tol)
    return Q @ (Q.T @ r)


def projector_matrix(B, rank_tol=DEFAULT_RANK_TOL):
    """The n x n projector ``A = B @ pinv(B)``, built symmetric by construction."""
    Q = column_basis(B, rank_tol)
    return Q @ Q.T


def spectral_norm(M):
    return float(svd(M).singular_values[0])


def smallest_nonzero_singular_value(M, rank_tol=DEFAULT_RANK_TOL):
    res = svd(M, rank_tol)
    if res.numeric_rank == 0:
        return 0.0
    return float(res.singular_values[res.numeric_rank - 1])


def penrose_residuals(M, Mp):
    """Max-entry residuals of the four Penrose conditions, in order."""
    M = as_matrix(M, "M")
    Mp = as_matrix(Mp, "Mp")
    if Mp.shape != (M.shape[1], M.shape[0]):
        raise ContractError(f"candidate pseudoinverse has shape {Mp.shape}, expected {M.shape[::-1]}")
    MMp = M @ Mp
    MpM = Mp @ M
    return (
        float(np.max(np.abs(MMp @ M - M))),
        float(np.max(np.abs(MpM @ Mp - Mp))),
        float(np.max(np.abs(MMp - MMp.T))),
        float(np.max(np.abs(MpM - MpM.T))),
    )


def projector_distance(Q1, Q2):
    """``||Q1 Q1^T - Q2 Q2^T||_2`` for orthonormal bases, without forming n x n matrices.

    Equal ranks give the sine of the largest principal angle; unequal ranks give 1.
    """
    Q1 = np.asarray(Q1, dtype=np.float64)
    Q2 = np.asarray(Q2, dtype=np.float64)
    if Q1.shape[0] != Q2.shape[0]:
        raise ContractError(f"bases live in different spaces: {Q1.shape[0]} vs {Q2.shape[0]} rows")
    k1, k2 = Q1.shape[1], Q2.shape[1]
    if k1 != k2:
        return 1.0
    if k1 == 0:
        return 0.0
    R = Q2 - Q1 @ (Q1.T @ Q2)
    return float(np.linalg.norm(R, 2))
