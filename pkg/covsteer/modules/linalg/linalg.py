"""
===============================================
Symmetric Matrix Kernels
===============================================

Dense symmetric-matrix helpers shared by the filter, augmented-state,
subproblem and Monte Carlo modules:
- symmetrization and PSD checks
- ascending symmetric eigendecomposition
- Schur-complement residual and the relative invertibility test
- covariance factorization for Gaussian sampling
"""

import logging
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import scipy.linalg as la

from covsteer import config
from covsteer.errors import DimensionError, NumericError, SingularityError

log = logging.getLogger(__name__)

# Symmetric by construction whenever returned from this module
SymMatrix = npt.NDArray[np.float64]


class EigenDecomp(NamedTuple):
    """Spectrum sorted ascending, column ``vectors[:, i]`` paired with ``values[i]``."""

    values: np.ndarray
    vectors: np.ndarray


def _as_square(m, name: str = "matrix") -> np.ndarray:
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    return arr


def symmetrize(m) -> SymMatrix:
    """Return ``(m + m.T) / 2``."""
    arr = _as_square(m)
    return 0.5 * (arr + arr.T)


def eig_sym(m) -> EigenDecomp:
    """
    Eigendecomposition of a symmetric matrix.

    Values come back ascending from LAPACK's ``syevd``; ties inside a
    degenerate eigenspace resolve however the routine resolves them.
    """
    arr = symmetrize(m)
    if not np.all(np.isfinite(arr)):
        raise NumericError("Eigendecomposition of a matrix with non-finite entries", matrix=arr)
    try:
        values, vectors = la.eigh(arr)
    except la.LinAlgError as e:
        raise NumericError(f"Symmetric eigendecomposition did not converge: {e}", matrix=arr) from e
    return EigenDecomp(values, vectors)


def min_eig(m) -> float:
    return float(la.eigh(symmetrize(m), eigvals_only=True, subset_by_index=[0, 0])[0])


def is_psd(m, tol: float = 0.0) -> bool:
    """True iff the smallest eigenvalue of ``m`` is at least ``-tol``."""
    if tol < 0:
        raise ValueError(f"tol must be non-negative, got {tol}")
    return min_eig(m) >= -tol


def rank(m, rtol: float = 1e-9) -> int:
    """Numerical rank of a symmetric matrix, counting |lambda| > rtol * max(1, |lambda|_max)."""
    values = eig_sym(m).values
    scale = max(1.0, float(np.max(np.abs(values))))
    return int(np.sum(np.abs(values) > rtol * scale))


def singularity_threshold(m) -> float:
    linalg_config = getattr(config, "linalg", {})
    rtol = linalg_config.get("singular_rtol", 1e-10)
    return rtol * max(1.0, float(np.linalg.norm(m, 2)))


def check_invertible(m, name: str = "matrix", stage=None) -> SymMatrix:
    """Raise SingularityError unless min eig(m) exceeds the relative singularity threshold."""
    arr = symmetrize(m)
    lam = min_eig(arr)
    threshold = singularity_threshold(arr)
    if not lam > threshold:
        raise SingularityError(
            f"{name} is singular: min eigenvalue {lam:.3e} <= threshold {threshold:.3e}",
            stage=stage,
        )
    return arr


def spd_solve(m, rhs, name: str = "matrix", stage=None) -> np.ndarray:
    """Solve ``m x = rhs`` for symmetric positive-definite ``m`` via Cholesky."""
    arr = symmetrize(m)
    try:
        factor = la.cho_factor(arr, lower=True, check_finite=True)
    except la.LinAlgError as e:
        raise SingularityError(f"{name} is not positive definite: {e}", stage=stage) from e
    return la.cho_solve(factor, np.asarray(rhs, dtype=float))


def schur_residual(Phat, U_aug, S_aug, stage=None) -> SymMatrix:
    """
    Return ``S_aug - U_aug Phat^{-1} U_aug^T``.

    ``Phat`` must pass the invertibility threshold of :func:`check_invertible`.
    """
    Phat = check_invertible(Phat, name="Phat", stage=stage)
    S_aug = _as_square(S_aug, "S_aug")
    U_aug = np.atleast_2d(np.asarray(U_aug, dtype=float))
    n = Phat.shape[0]
    if U_aug.shape != (S_aug.shape[0], n):
        raise DimensionError(
            f"U_aug has shape {U_aug.shape}, expected {(S_aug.shape[0], n)} for Phat {Phat.shape} "
            f"and S_aug {S_aug.shape}"
        )
    X = spd_solve(Phat, U_aug.T, name="Phat", stage=stage)
    return symmetrize(S_aug - U_aug @ X)


def psd_factor(cov, clamp_tol=None) -> np.ndarray:
    """
    Return F with ``F @ F.T == cov`` for a PSD (possibly singular) covariance.

    Eigenvalues in ``[-clamp_tol * max(1, ||cov||), 0)`` are clamped to zero;
    anything more negative is rejected.
    """
    if clamp_tol is None:
        clamp_tol = getattr(config, "linalg", {}).get("clamp_tol", 1e-10)
    values, vectors = eig_sym(cov)
    if values.size == 0:
        return np.zeros((0, 0))
    floor = -clamp_tol * max(1.0, float(np.max(np.abs(values))))
    if values[0] < floor:
        raise NumericError(f"Covariance is not PSD: min eigenvalue {values[0]:.3e}", matrix=symmetrize(cov))
    values = np.clip(values, 0.0, None)
    return vectors * np.sqrt(values)
