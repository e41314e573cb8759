"""Dense linear algebra for small-to-medium matrices.

All functions are pure and deterministic and work in 64-bit floating
point. Orthonormalization uses Householder QR and the singular value
decomposition uses LAPACK's ``gesvd`` driver, both through scipy.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import scipy.linalg

from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.types import Matrix, Vector


@dataclass(frozen=True)
class SvdResult:
    """Thin singular value decomposition m = p · diag(sigma) · qᵀ.

    Singular values are sorted nonincreasing. The largest-magnitude entry
    of every left singular vector is positive; the matching right singular
    vector carries the compensating sign.
    """

    p: Matrix
    sigma: Vector
    q: Matrix

    def reconstruct(self) -> Matrix:
        return (self.p * self.sigma) @ self.q.T


def as_matrix(data: Any) -> Matrix:
    """Convert nested sequences or arrays into a finite float64 matrix.

    >>> as_matrix([[1, 2], [3, 4]]).shape
    (2, 2)
    """

    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("expected a 2-D matrix, got {}-D".format(m.ndim))
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError("matrix dimensions must be positive")
    require_finite(m, "matrix")
    return m


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def require_finite(m: Matrix, what: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise NumericError("{} has non-finite entries".format(what))


def require_shape(
    m: Matrix, shape: tuple[int, int], what: str = "matrix"
) -> None:
    if m.shape != shape:
        raise ShapeError(
            "{} has shape {}, expected {}".format(what, m.shape, shape)
        )


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product.

    >>> matmul(as_matrix([[1, 2], [3, 4]]), as_matrix([[5], [6]]))
    array([[17.],
           [39.]])
    """

    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            "cannot multiply {} by {}".format(a.shape, b.shape)
        )
    return a @ b


def multi_matmul(matrices: Sequence[Matrix]) -> Matrix:
    for a, b in zip(matrices, matrices[1:]):
        if a.shape[1] != b.shape[0]:
            raise ShapeError(
                "cannot multiply {} by {}".format(a.shape, b.shape)
            )
    return np.linalg.multi_dot(list(matrices))


def householder_qr(m: Matrix) -> tuple[Matrix, Matrix]:
    """Economic QR factorization m = q r with diag(r) >= 0.

    q has min(rows, cols) orthonormal columns, also for wide or
    rank-deficient input.
    """

    q, r = scipy.linalg.qr(m, mode="economic")
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return (
        np.asarray(q * signs, dtype=np.float64),
        np.asarray(signs[:, None] * r, dtype=np.float64),
    )


def _householder_q(m: Matrix) -> Matrix:
    return householder_qr(m)[0]


def orthonormalize(m: Matrix) -> Matrix:
    """Return a matrix with orthonormal columns spanning the columns of m.

    Rank-deficient input is completed to a full set of orthonormal columns
    by the Householder reflections.
    """

    if m.shape[0] < m.shape[1]:
        raise ShapeError(
            "cannot orthonormalize {} columns in {} dimensions".format(
                m.shape[1], m.shape[0]
            )
        )
    return _householder_q(m)


def orthonormal_span(m: Matrix) -> Matrix:
    """Like orthonormalize(), but cap the column count at the row count."""
    return _householder_q(m)


def svd(m: Matrix) -> SvdResult:
    """Thin SVD m = P diag(σ) Qᵀ with σ in descending order.

    Singular vectors are only fixed up to sign. Each column of P is
    flipped so that its entry of largest magnitude is positive (the first
    such entry on ties), and the matching column of Q gets the same sign,
    so the product is unchanged and repeated calls agree.
    """

    require_finite(m, "svd input")
    p, sigma, qt = scipy.linalg.svd(
        m, full_matrices=False, lapack_driver="gesvd"
    )
    q = qt.T
    pivots = np.argmax(np.abs(p), axis=0)
    signs = np.where(p[pivots, np.arange(p.shape[1])] < 0.0, -1.0, 1.0)
    return SvdResult(
        p=np.asarray(p * signs, dtype=np.float64),
        sigma=np.asarray(sigma, dtype=np.float64),
        q=np.asarray(q * signs, dtype=np.float64),
    )


def frobenius_norm(m: Matrix) -> float:
    return float(np.linalg.norm(m, "fro"))


def orthonormality_error(q: Matrix) -> float:
    """Return ‖QᵀQ − I‖_F."""
    return frobenius_norm(q.T @ q - identity(q.shape[1]))


def condition_number(m: Matrix) -> float:
    sigma = scipy.linalg.svdvals(m)
    if sigma[-1] == 0.0:
        return float("inf")
    return float(sigma[0] / sigma[-1])


def elementwise_sqrt(m: Matrix, what: str = "matrix") -> Matrix:
    if np.any(m < 0.0):
        raise NumericError("{} has negative entries".format(what))
    return np.sqrt(m)


def pad_or_crop(m: Matrix, rows: int, cols: int) -> Matrix:
    """Return the top-left rows × cols block of m, zero-padded as needed."""
    result = zeros(rows, cols)
    r = min(rows, m.shape[0])
    c = min(cols, m.shape[1])
    result[:r, :c] = m[:r, :c]
    return result
