"""Dense symmetric linear algebra for calibration and quantization.

Provides Gram products of activation matrices, diagonal dampening,
positive-definite inversion via Cholesky solves, upper Cholesky factors,
and the rank-one inverse downdate used when a coordinate is removed from
the quantization problem.

Everything here is float64: the iterative quantizer applies thousands of
compensating updates, and accumulated roundoff in lower precision is a
known way to collapse quantized model quality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DataError, DegenerateHessianWarning, NumericalError

DOWNDATE_EPS = 1e-12


@dataclass(frozen=True)
class SymMatrix:
    """A square, exactly symmetric float64 matrix.

    Symmetry is bitwise (``a[i, j] == a[j, i]``), not approximate; callers
    producing nearly-symmetric products must symmetrize before wrapping.
    """

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"expected a square matrix, got shape {a.shape}")
        if a.shape[0] < 1:
            raise DataError("matrix dimension must be >= 1")
        if not np.array_equal(a, a.T):
            raise DataError("matrix is not symmetric")
        object.__setattr__(self, "a", a)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def diag(self) -> np.ndarray:
        return np.diag(self.a).copy()


@dataclass(frozen=True)
class CholeskyFactor:
    """Upper-triangular factor U with ``U.T @ U`` reconstructing the source matrix."""

    upper: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.upper, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise DataError(f"expected a square factor, got shape {u.shape}")
        if np.any(np.tril(u, k=-1) != 0.0):
            raise DataError("factor is not upper triangular")
        if np.any(np.diag(u) <= 0.0):
            raise NumericalError("Cholesky factor has a non-positive pivot")
        object.__setattr__(self, "upper", u)

    @property
    def dim(self) -> int:
        return self.upper.shape[0]


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Average the two triangles; the result is bitwise symmetric."""
    return (a + a.T) / 2.0


def gram_from_inputs(x: np.ndarray) -> SymMatrix:
    """Form the scaled Gram matrix ``2 * X @ X.T`` of a features x tokens activation matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected a 2-D activation matrix, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise DataError("empty calibration input")
    g = 2.0 * (x @ x.T)
    return SymMatrix(symmetrize(g))


def dampen(h: SymMatrix, df: float) -> SymMatrix:
    """Add ``df * mean(diag(h))`` to every diagonal entry; off-diagonals untouched.

    An all-zero diagonal with df > 0 is degenerate (there is nothing to
    scale the dampening by); the matrix is returned unchanged with a
    DegenerateHessianWarning so callers can fall back to an absolute floor.
    """
    if df < 0:
        raise DataError("dampening factor must be nonnegative")
    if df == 0:
        return h
    d = np.diag(h.a)
    if np.all(d == 0.0):
        warnings.warn("degenerate Hessian: all-zero diagonal", DegenerateHessianWarning)
        return h
    out = h.a.copy()
    out[np.diag_indices_from(out)] += df * float(np.mean(d))
    return SymMatrix(out)


def add_absolute_dampening(h: SymMatrix, df_abs: float) -> SymMatrix:
    """Add an absolute constant to the diagonal (floor for degenerate Hessians)."""
    out = h.a.copy()
    out[np.diag_indices_from(out)] += df_abs
    return SymMatrix(out)


def invert_pd(h: SymMatrix) -> SymMatrix:
    """Invert a symmetric positive definite matrix via a single Cholesky factorization."""
    try:
        c, lower = scipy.linalg.cho_factor(h.a, lower=False, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError("matrix not positive definite; increase dampening") from exc
    inv = scipy.linalg.cho_solve((c, lower), np.eye(h.dim), check_finite=False)
    return SymMatrix(symmetrize(inv))


def cholesky_upper(m: SymMatrix) -> CholeskyFactor:
    """Upper-triangular U with ``U.T @ U == m``."""
    try:
        lower = np.linalg.cholesky(m.a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("not positive definite") from exc
    return CholeskyFactor(lower.T.copy())


def downdate_inverse(hinv: SymMatrix, i: int) -> SymMatrix:
    """Remove coordinate i from an inverse: rank-one update, then delete row/column i.

    Equals the inverse of the original matrix with row/column i deleted.
    Surviving diagonal entries can only shrink (the subtracted term is a
    nonnegative square), so no new inverse-diagonal outliers appear.
    """
    if not 0 <= i < hinv.dim:
        raise DataError(f"index {i} out of range for dim {hinv.dim}")
    if hinv.dim == 1:
        raise DataError("cannot downdate a 1x1 matrix")
    d = hinv.a[i, i]
    if d <= DOWNDATE_EPS:
        raise NumericalError("degenerate diagonal in downdate")
    col = hinv.a[:, i]
    out = hinv.a - np.outer(col, col) / d
    out = np.delete(np.delete(out, i, axis=0), i, axis=1)
    return SymMatrix(out)
