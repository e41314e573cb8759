"""Low-rank factors, tangent-space projections and rank truncation.

A weight W of rank r is stored as W = U S Vᵀ with orthonormal U (n_out × r)
and V (n_in × r) and a square coefficient S (r × r). Momentum terms share
the bases of their weight and are stored as r × r coefficients only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from lrmomentum import LOGGER_NAME
from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.linalg import (
    frobenius_norm,
    orthonormal_span,
    require_shape,
    svd,
)
from lrmomentum.types import Matrix, Vector


@dataclass(frozen=True)
class LowRankFactors:
    u: Matrix
    s: Matrix
    v: Matrix

    def __post_init__(self) -> None:
        r = self.s.shape[0]
        if self.s.ndim != 2 or self.s.shape[1] != r:
            raise ShapeError(
                "coefficient must be square, got {}".format(self.s.shape)
            )
        if r < 1:
            raise ShapeError("rank must be positive")
        if self.u.ndim != 2 or self.u.shape[1] != r:
            raise ShapeError(
                "basis U has shape {}, expected (n_out, {})".format(
                    self.u.shape, r
                )
            )
        if self.v.ndim != 2 or self.v.shape[1] != r:
            raise ShapeError(
                "basis V has shape {}, expected (n_in, {})".format(
                    self.v.shape, r
                )
            )

    @property
    def rank(self) -> int:
        return int(self.s.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.u.shape[0]), int(self.v.shape[0])

    @property
    def parameter_count(self) -> int:
        n_out, n_in = self.shape
        r = self.rank
        return (n_out + n_in) * r + r * r


@dataclass(frozen=True)
class TruncationPolicy:
    """Rank selection rule applied after every augmented update.

    tau is the relative tolerance: singular values are dropped as long as
    the Frobenius norm of the dropped tail stays below tau · ‖Ŝ‖_F. The
    selected rank is then clamped to [r_min, r_max], both capped by the
    augmented size. r_max = None means "up to the augmented size".

    fixed_rank replaces the tolerance rule by a fixed target rank.
    guard_momentum raises the rank further until the discarded part of the
    momentum coefficient is below the same tolerance.
    """

    tau: float = 0.05
    r_min: int = 2
    r_max: int | None = None
    fixed_rank: int | None = None
    guard_momentum: bool = False

    def __post_init__(self) -> None:
        if self.tau < 0.0:
            raise ValueError("tau must be >= 0")
        if self.r_min < 1:
            raise ValueError("r_min must be positive")
        if self.r_max is not None and self.r_max < self.r_min:
            raise ValueError("r_min must not exceed r_max")
        if self.fixed_rank is not None and self.fixed_rank < 1:
            raise ValueError("fixed_rank must be positive")

    def rank_bounds(self, size: int) -> tuple[int, int]:
        high = size if self.r_max is None else min(self.r_max, size)
        return min(self.r_min, high), high


def reconstruct(f: LowRankFactors) -> Matrix:
    return np.linalg.multi_dot([f.u, f.s, f.v.T])


def factorize(w: Matrix, rank: int) -> LowRankFactors:
    """Truncated SVD of a dense weight to the given rank."""
    if not 1 <= rank <= min(w.shape):
        raise ShapeError(
            "rank {} out of range for shape {}".format(rank, w.shape)
        )
    dec = svd(w)
    return LowRankFactors(
        u=dec.p[:, :rank], s=np.diag(dec.sigma[:rank]), v=dec.q[:, :rank]
    )


def random_factors(
    n_out: int, n_in: int, rank: int, rng: np.random.Generator
) -> LowRankFactors:
    """Factorize a dense Gaussian initialization with std 1/√n_in."""
    w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
    return factorize(w, rank)


def _require_ambient(f: LowRankFactors, z: Matrix) -> None:
    require_shape(z, f.shape, "ambient matrix")


def tangent_project(f: LowRankFactors, z: Matrix) -> Matrix:
    """Project z onto the tangent space of the rank-r manifold at U S Vᵀ.

    P(W)Z = U Uᵀ Z (I − V Vᵀ) + Z V Vᵀ
    """

    _require_ambient(f, z)
    uuz = f.u @ (f.u.T @ z)
    zvv = (z @ f.v) @ f.v.T
    return uuz - (uuz @ f.v) @ f.v.T + zvv


def naive_project(
    f: LowRankFactors, mom: LowRankFactors, z: Matrix
) -> Matrix:
    """Apply the map induced by independent momentum updates of U, S, V.

    Returns z V Sᵀ S_V V_Vᵀ + U_V Uᵀ z V V_Vᵀ + U_V S_V Sᵀ Uᵀ z, where mom
    holds (U_V, S_V, V_V). This map is not a projection and can vanish
    where the tangent projection does not.
    """

    _require_ambient(f, z)
    if mom.shape != f.shape or mom.rank != f.rank:
        raise ShapeError("momentum factors do not match weight factors")
    first, second, third = naive_project_terms(f, mom, z)
    return first + second + third


def naive_project_terms(
    f: LowRankFactors, mom: LowRankFactors, z: Matrix
) -> tuple[Matrix, Matrix, Matrix]:
    _require_ambient(f, z)
    z_v = z @ f.v
    ut_z = f.u.T @ z
    first = np.linalg.multi_dot([z_v, f.s.T, mom.s, mom.v.T])
    second = np.linalg.multi_dot([mom.u, ut_z @ f.v, mom.v.T])
    third = np.linalg.multi_dot([mom.u, mom.s, f.s.T, ut_z])
    return first, second, third


def factor_gradients(
    f: LowRankFactors, grad_w: Matrix
) -> tuple[Matrix, Matrix, Matrix]:
    """Return (∇_U L, ∇_V L, ∇_S L) given ∇_W L at W = U S Vᵀ."""
    _require_ambient(f, grad_w)
    grad_u = grad_w @ f.v @ f.s.T
    grad_v = grad_w.T @ f.u @ f.s
    grad_s = f.u.T @ grad_w @ f.v
    return grad_u, grad_v, grad_s


def basis_augmentation(b: Matrix, g: Matrix) -> Matrix:
    """Orthonormalize [g | b] into a basis spanning both blocks.

    The result has min(2r, n) columns; when 2r exceeds n the whole space
    is returned.
    """

    if b.shape != g.shape:
        raise ShapeError(
            "basis {} and dynamics {} differ in shape".format(
                b.shape, g.shape
            )
        )
    return orthonormal_span(np.hstack([g, b]))


def project_moment(
    u_hat: Matrix, f: LowRankFactors, moment: Matrix, v_hat: Matrix
) -> Matrix:
    """Express a moment given in the (U, V) frame in the (Û, V̂) frame."""
    require_shape(moment, (f.rank, f.rank), "moment coefficient")
    return np.linalg.multi_dot([u_hat.T @ f.u, moment, f.v.T @ v_hat])


def carry_second_moment(left: Matrix, moment: Matrix, right: Matrix) -> Matrix:
    """Carry a second moment through the frame change left · M · right.

    Every new entry is a combination of the old entries with the squared
    frame coefficients as weights, so the result is nonnegative. When no
    direction is discarded the total of M is kept, and a signed
    permutation only reorders M. Entries cannot cancel: if |V| ≤ c·√M,
    the carried first moment left · V · right is bounded by c·√(kl) times
    the root of the carried second moment, k × l being the shape of M.
    """

    if np.any(moment < 0.0):
        raise NumericError("second moment has negative entries")
    return np.linalg.multi_dot([left**2, moment, right**2])


def project_second_moment(
    u_hat: Matrix, f: LowRankFactors, moment: Matrix, v_hat: Matrix
) -> Matrix:
    """Express a second moment given in the (U, V) frame in the (Û, V̂)
    frame."""
    require_shape(moment, (f.rank, f.rank), "second moment coefficient")
    return carry_second_moment(u_hat.T @ f.u, moment, f.v.T @ v_hat)


def _tail_norms(sigma: Vector) -> Vector:
    # tails[k] = ‖sigma[k:]‖; tails[len(sigma)] = 0
    squares = (sigma**2)[::-1]
    tails = np.sqrt(np.cumsum(squares))[::-1]
    return np.append(tails, 0.0)


def _select_rank(
    sigma: Vector,
    theta: float,
    policy: TruncationPolicy,
) -> int:
    size = len(sigma)
    low, high = policy.rank_bounds(size)
    if policy.fixed_rank is not None:
        return max(low, min(policy.fixed_rank, high))
    tails = _tail_norms(sigma)
    rank = int(np.argmax(tails <= theta))
    return max(low, min(rank, high))


@dataclass(frozen=True)
class _Truncation:
    factors: LowRankFactors
    p: Matrix
    q: Matrix


def _truncate(
    s_hat: Matrix,
    u_hat: Matrix,
    v_hat: Matrix,
    policy: TruncationPolicy,
    sv_hat: Matrix | None = None,
) -> _Truncation:
    # Ŝ is only rectangular when one basis was capped at its dimension.
    a, b = u_hat.shape[1], v_hat.shape[1]
    require_shape(s_hat, (a, b), "augmented coefficient")
    size = min(a, b)
    dec = svd(s_hat)
    theta = policy.tau * frobenius_norm(s_hat)
    rank = _select_rank(dec.sigma, theta, policy)
    if policy.guard_momentum and sv_hat is not None:
        _, high = policy.rank_bounds(size)
        while rank < high and _discarded_momentum(
            sv_hat, dec.p[:, :rank], dec.q[:, :rank]
        ) > theta:
            rank += 1
    p = dec.p[:, :rank]
    q = dec.q[:, :rank]
    logging.getLogger(LOGGER_NAME).debug(
        "truncated augmented rank %d to %d", size, rank
    )
    factors = LowRankFactors(
        u=u_hat @ p, s=np.diag(dec.sigma[:rank]), v=v_hat @ q
    )
    return _Truncation(factors, p, q)


def _discarded_momentum(sv_hat: Matrix, p: Matrix, q: Matrix) -> float:
    kept = np.linalg.multi_dot([p, p.T, sv_hat, q, q.T])
    return frobenius_norm(sv_hat - kept)


def truncate_hb(
    s_hat: Matrix,
    sv_hat: Matrix,
    u_hat: Matrix,
    v_hat: Matrix,
    policy: TruncationPolicy,
) -> tuple[LowRankFactors, Matrix]:
    """Truncate an augmented heavy-ball update.

    The momentum coefficient is re-expressed in the truncated bases. Since
    Uᵀ Û = Pᵀ by construction, Uᵀ Û Ŝ_V V̂ᵀ V reduces to Pᵀ Ŝ_V Q.
    """

    require_shape(sv_hat, s_hat.shape, "augmented momentum")
    t = _truncate(s_hat, u_hat, v_hat, policy, sv_hat)
    return t.factors, t.p.T @ sv_hat @ t.q


def truncate_adam(
    s_hat: Matrix,
    sv_hat: Matrix,
    sk_hat: Matrix,
    u_hat: Matrix,
    v_hat: Matrix,
    policy: TruncationPolicy,
) -> tuple[LowRankFactors, Matrix, Matrix]:
    require_shape(sv_hat, s_hat.shape, "augmented first moment")
    require_shape(sk_hat, s_hat.shape, "augmented second moment")
    t = _truncate(s_hat, u_hat, v_hat, policy, sv_hat)
    s_v = t.p.T @ sv_hat @ t.q
    s_k = carry_second_moment(t.p.T, sk_hat, t.q)
    return t.factors, s_v, s_k


def truncate_naive(
    s_hat: Matrix,
    u_hat: Matrix,
    v_hat: Matrix,
    policy: TruncationPolicy,
) -> LowRankFactors:
    """Truncate without touching any momentum coefficient."""
    return _truncate(s_hat, u_hat, v_hat, policy).factors
