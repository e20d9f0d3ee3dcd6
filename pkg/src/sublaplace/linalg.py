"""Dense symmetric linear algebra used by the inference modules.

All matrices are 64-bit numpy arrays. Factorizations go through
:func:`cholesky`, which rescues borderline positive-definite input with an
escalating diagonal jitter and records how much was added, so downstream
covariances stay honest about the perturbation they absorbed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPSD, NotPositiveDefinite

SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T equal to the input matrix
    plus ``jitter_applied`` on the diagonal."""

    lower: np.ndarray
    jitter_applied: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _as_square_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    scale = 1.0 + float(np.max(np.abs(m))) if m.size else 1.0
    if float(np.max(np.abs(m - m.T))) > SYMMETRY_TOL * scale:
        raise DimensionMismatch("matrix is not symmetric to tolerance 1e-8")
    return 0.5 * (m + m.T)


def cholesky(m: np.ndarray, max_jitter: float = 1e-3) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix, adding jitter if needed.

    A failed plain factorization is retried with jitter starting at
    1e-10 * mean(diag) and escalating tenfold until ``max_jitter``.

    Raises
    ------
    NotPositiveDefinite
        If the factorization still fails at the maximum jitter.
    """
    a = _as_square_symmetric(m)
    mean_diag = float(np.mean(np.abs(np.diag(a)))) if a.size else 1.0
    base = 1e-10 * max(mean_diag, np.finfo(np.float64).tiny)
    jitter = 0.0
    while True:
        try:
            lower = np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
            return CholeskyFactor(lower=lower, jitter_applied=jitter)
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10.0
            if jitter > max_jitter:
                raise NotPositiveDefinite(
                    f"matrix not positive definite even with jitter {jitter:.3e}",
                    jitter_attempted=jitter,
                ) from None


def solve(f: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b for one or more right-hand sides."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(
            f"right-hand side has {b.shape[0]} rows, factor has dimension {f.dim}"
        )
    y = solve_triangular(f.lower, b, lower=True)
    return solve_triangular(f.lower.T, y, lower=False)


def quad_form(f: CholeskyFactor, v: np.ndarray) -> float:
    """Return v^T A^{-1} v >= 0 where A is the factored matrix."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != f.dim:
        raise DimensionMismatch(
            f"vector has length {v.shape[0]}, factor has dimension {f.dim}"
        )
    z = solve_triangular(f.lower, v, lower=True)
    return float(z @ z)


def invert_spd(f: CholeskyFactor) -> np.ndarray:
    """Explicit inverse of the factored matrix (symmetrized)."""
    inv = solve(f, np.eye(f.dim))
    return 0.5 * (inv + inv.T)


def log_det(f: CholeskyFactor) -> float:
    """Log-determinant of the factored matrix."""
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues down to -1e-10 (absolute) are tolerated and clamped to zero;
    anything below -1e-6 * ||m|| raises :class:`NotPSD`.
    """
    a = _as_square_symmetric(m)
    eigvals, eigvecs = np.linalg.eigh(a)
    scale = float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    if eigvals.size and eigvals[0] < -max(1e-6 * scale, 1e-10):
        raise NotPSD(f"matrix has eigenvalue {eigvals[0]:.3e}, not PSD")
    root = eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return 0.5 * (root + root.T)
