"""Per-layer optimizer steps.

Full-rank baselines (heavy ball, Adam/AdamW), the low-rank heavy ball and
low-rank Adam methods that share bases between weights and moments, their
naive counterparts that leave moments in stale bases, and LoRA-style
simultaneous descent on the factors.

Every step function is pure: it returns new factors and a new state and
leaves its inputs untouched, also when it raises.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Protocol, Union

import numpy as np

from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.linalg import (
    elementwise_sqrt,
    pad_or_crop,
    require_shape,
    zeros,
)
from lrmomentum.lowrank import (
    LowRankFactors,
    TruncationPolicy,
    basis_augmentation,
    factor_gradients,
    project_moment,
    project_second_moment,
    reconstruct,
    truncate_adam,
    truncate_hb,
    truncate_naive,
)
from lrmomentum.types import LossAndGrad, Matrix


class GradientOracle(Protocol):
    """Gradient access for one layer, bound to one data batch."""

    def grad_at_factors(
        self, f: LowRankFactors
    ) -> tuple[float, Matrix, Matrix]:
        """Return (loss, ∇_U L, ∇_V L) at U S Vᵀ."""
        ...

    def grad_at_coeff(
        self, u_hat: Matrix, s_bar: Matrix, v_hat: Matrix
    ) -> tuple[float, Matrix]:
        """Return (loss, ∇_S̄ L) at Û S̄ V̂ᵀ."""
        ...

    def grad_w(self, w: Matrix) -> tuple[float, Matrix]:
        """Return (loss, ∇_W L) at a dense weight."""
        ...


class WeightOracle:
    """Gradient oracle on top of a dense loss-and-gradient callable.

    Factor and coefficient gradients are derived from ∇_W L, using
    ∇_S̄ L(Û S̄ V̂ᵀ) = Ûᵀ ∇_W L V̂.
    """

    def __init__(self, loss_and_grad: LossAndGrad) -> None:
        self.loss_and_grad = loss_and_grad

    def grad_w(self, w: Matrix) -> tuple[float, Matrix]:
        return self.loss_and_grad(w)

    def grad_at_factors(
        self, f: LowRankFactors
    ) -> tuple[float, Matrix, Matrix]:
        loss, grad = self.loss_and_grad(reconstruct(f))
        grad_u, grad_v, _ = factor_gradients(f, grad)
        return loss, grad_u, grad_v

    def grad_at_coeff(
        self, u_hat: Matrix, s_bar: Matrix, v_hat: Matrix
    ) -> tuple[float, Matrix]:
        loss, grad = self.loss_and_grad(
            np.linalg.multi_dot([u_hat, s_bar, v_hat.T])
        )
        return loss, u_hat.T @ grad @ v_hat


@dataclass(frozen=True)
class HeavyBallParams:
    lr: float
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")


@dataclass(frozen=True)
class AdamParams:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be > 0")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be >= 0")


OptimizerParams = Union[HeavyBallParams, AdamParams]


@dataclass(frozen=True)
class HeavyBallState:
    s_v: Matrix
    params: HeavyBallParams

    @classmethod
    def zero(cls, rank: int, params: HeavyBallParams) -> HeavyBallState:
        return cls(zeros(rank, rank), params)


@dataclass(frozen=True)
class AdamState:
    s_v: Matrix
    s_k: Matrix
    n: int
    params: AdamParams

    @classmethod
    def zero(cls, rank: int, params: AdamParams) -> AdamState:
        return cls(zeros(rank, rank), zeros(rank, rank), 0, params)


@dataclass(frozen=True)
class FullState:
    """Dense weight with its heavy-ball velocity or Adam moments.

    For heavy ball, k is None and n stays 0.
    """

    w: Matrix
    v: Matrix
    k: Matrix | None
    n: int
    params: OptimizerParams

    def __post_init__(self) -> None:
        require_shape(self.v, self.w.shape, "first moment")
        if self.k is not None:
            require_shape(self.k, self.w.shape, "second moment")

    @classmethod
    def start(cls, w: Matrix, params: OptimizerParams) -> FullState:
        k = np.zeros_like(w) if isinstance(params, AdamParams) else None
        return cls(w, np.zeros_like(w), k, 0, params)


class LoraStates(NamedTuple):
    u: FullState
    s: FullState
    v: FullState

    @classmethod
    def start(
        cls, f: LowRankFactors, params: OptimizerParams
    ) -> LoraStates:
        return cls(
            FullState.start(f.u, params),
            FullState.start(f.s, params),
            FullState.start(f.v, params),
        )

    def factors(self) -> LowRankFactors:
        return LowRankFactors(self.u.w, self.s.w, self.v.w)


OptimizerState = Union[HeavyBallState, AdamState, FullState, LoraStates]


def linear_decay(lr: float, step: int, max_steps: int) -> float:
    """Learning rate decayed linearly from lr to zero over max_steps.

    >>> linear_decay(0.1, 0, 10)
    0.1
    >>> linear_decay(0.1, 5, 10)
    0.05
    """

    if max_steps <= 0:
        return lr
    return lr * max(0.0, 1.0 - step / max_steps)


def optimizer_state_size(state: OptimizerState) -> int:
    """Number of floats an optimizer state stores beyond the weight."""
    if isinstance(state, HeavyBallState):
        return int(state.s_v.size)
    elif isinstance(state, AdamState):
        return int(state.s_v.size + state.s_k.size)
    elif isinstance(state, LoraStates):
        return sum(optimizer_state_size(s) for s in state)
    else:
        extra = state.v.size
        if state.k is not None:
            extra += state.k.size
        return int(extra)


def _require_finite(*matrices: Matrix) -> None:
    for m in matrices:
        if not np.all(np.isfinite(m)):
            raise NumericError("non-finite gradient")


def _require_heavy_ball(params: OptimizerParams) -> HeavyBallParams:
    if not isinstance(params, HeavyBallParams):
        raise TypeError("heavy-ball step needs HeavyBallParams")
    return params


def _require_adam(params: OptimizerParams) -> AdamParams:
    if not isinstance(params, AdamParams):
        raise TypeError("Adam step needs AdamParams")
    return params


def _heavy_ball_update(state: FullState, grad: Matrix) -> FullState:
    params = _require_heavy_ball(state.params)
    v = (1.0 - params.gamma) * state.v - params.lr * grad
    w = state.w + params.lr * v
    return replace(state, w=w, v=v)


def _adam_update(state: FullState, grad: Matrix) -> FullState:
    params = _require_adam(state.params)
    assert state.k is not None
    n = state.n + 1
    v = params.beta1 * state.v + (1.0 - params.beta1) * grad
    k = params.beta2 * state.k + (1.0 - params.beta2) * grad**2
    v_hat = v / (1.0 - params.beta1**n)
    k_hat = k / (1.0 - params.beta2**n)
    w = state.w - params.lr * v_hat / (np.sqrt(k_hat) + params.eps)
    if params.weight_decay > 0.0:
        w = w - params.lr * params.weight_decay * state.w
    return replace(state, w=w, v=v, k=k, n=n)


def hb_full_step(
    state: FullState, oracle: GradientOracle
) -> tuple[FullState, float]:
    """One full-rank heavy-ball step: V ← (1−γ)V − λg, then W ← W + λV."""
    loss, grad = oracle.grad_w(state.w)
    _require_finite(grad)
    return _heavy_ball_update(state, grad), loss


def adam_full_step(
    state: FullState, oracle: GradientOracle
) -> tuple[FullState, float]:
    """One full-rank Adam step, ε outside the root.

    With weight_decay > 0 the decoupled (AdamW) decay λ·wd·W is
    subtracted as well.
    """

    loss, grad = oracle.grad_w(state.w)
    _require_finite(grad)
    return _adam_update(state, grad), loss


@dataclass(frozen=True)
class _AugmentedFrame:
    u_hat: Matrix
    v_hat: Matrix
    s_bar: Matrix
    grad_s: Matrix
    loss: float


def _augment(
    f: LowRankFactors, oracle: GradientOracle
) -> tuple[Matrix, Matrix, float]:
    loss, grad_u, grad_v = oracle.grad_at_factors(f)
    _require_finite(grad_u, grad_v)
    u_hat = basis_augmentation(f.u, grad_u)
    v_hat = basis_augmentation(f.v, grad_v)
    return u_hat, v_hat, loss


def _coefficient_gradient(
    oracle: GradientOracle, u_hat: Matrix, s_bar: Matrix, v_hat: Matrix
) -> Matrix:
    _, grad_s = oracle.grad_at_coeff(u_hat, s_bar, v_hat)
    _require_finite(grad_s)
    return grad_s


def _require_rank(f: LowRankFactors, *moments: Matrix) -> None:
    for m in moments:
        if m.shape != (f.rank, f.rank):
            raise ShapeError(
                "moment coefficient {} does not match rank {}".format(
                    m.shape, f.rank
                )
            )


def _require_nonnegative(s_k: Matrix) -> None:
    if np.any(s_k < 0.0):
        raise NumericError("second moment has negative entries")


def lr_hb_step(
    f: LowRankFactors,
    state: HeavyBallState,
    oracle: GradientOracle,
    policy: TruncationPolicy,
) -> tuple[LowRankFactors, HeavyBallState, float]:
    """One step of the low-rank heavy-ball method.

    Bases are augmented with the factor gradients, weight and momentum
    coefficients are expressed in the augmented frame, updated there and
    truncated together, so that both keep sharing one pair of bases.
    """

    _require_rank(f, state.s_v)
    params = state.params
    u_hat, v_hat, loss = _augment(f, oracle)
    s_bar = project_moment(u_hat, f, f.s, v_hat)
    sv_bar = project_moment(u_hat, f, state.s_v, v_hat)
    grad_s = _coefficient_gradient(oracle, u_hat, s_bar, v_hat)
    sv_hat = (1.0 - params.gamma) * sv_bar - params.lr * grad_s
    s_hat = s_bar + params.lr * sv_hat
    factors, s_v = truncate_hb(s_hat, sv_hat, u_hat, v_hat, policy)
    return factors, replace(state, s_v=s_v), loss


def lr_hb_naive_step(
    f: LowRankFactors,
    state: HeavyBallState,
    oracle: GradientOracle,
    policy: TruncationPolicy,
) -> tuple[LowRankFactors, HeavyBallState, float]:
    """Low-rank heavy ball that never moves the momentum between bases."""
    _require_rank(f, state.s_v)
    params = state.params
    u_hat, v_hat, loss = _augment(f, oracle)
    size = u_hat.shape[1], v_hat.shape[1]
    s_bar = project_moment(u_hat, f, f.s, v_hat)
    sv_bar = pad_or_crop(state.s_v, *size)
    grad_s = _coefficient_gradient(oracle, u_hat, s_bar, v_hat)
    sv_hat = (1.0 - params.gamma) * sv_bar - params.lr * grad_s
    s_hat = s_bar + params.lr * sv_hat
    factors = truncate_naive(s_hat, u_hat, v_hat, policy)
    r = factors.rank
    return factors, replace(state, s_v=pad_or_crop(sv_hat, r, r)), loss


def _adam_coefficient_update(
    s_bar: Matrix,
    sv_bar: Matrix,
    sk_bar: Matrix,
    grad_s: Matrix,
    n: int,
    params: AdamParams,
) -> tuple[Matrix, Matrix, Matrix]:
    sv_hat = params.beta1 * sv_bar + (1.0 - params.beta1) * grad_s
    sk_hat = params.beta2 * sk_bar + (1.0 - params.beta2) * grad_s**2
    sv_check = sv_hat / (1.0 - params.beta1**n)
    sk_check = sk_hat / (1.0 - params.beta2**n)
    root = elementwise_sqrt(sk_check + params.eps, "second moment")
    s_hat = s_bar - params.lr * sv_check / root
    if params.weight_decay > 0.0:
        s_hat = s_hat - params.lr * params.weight_decay * s_bar
    return s_hat, sv_hat, sk_hat


def lr_adam_step(
    f: LowRankFactors,
    state: AdamState,
    oracle: GradientOracle,
    policy: TruncationPolicy,
) -> tuple[LowRankFactors, AdamState, float]:
    """One step of the low-rank Adam method, ε inside the root.

    The first moment changes frame like the coefficient. The second
    moment is carried with squared frame weights, see
    carry_second_moment(), so it stays nonnegative and never cancels
    where the first moment is large.
    """

    _require_rank(f, state.s_v, state.s_k)
    _require_nonnegative(state.s_k)
    u_hat, v_hat, loss = _augment(f, oracle)
    s_bar = project_moment(u_hat, f, f.s, v_hat)
    sv_bar = project_moment(u_hat, f, state.s_v, v_hat)
    sk_bar = project_second_moment(u_hat, f, state.s_k, v_hat)
    grad_s = _coefficient_gradient(oracle, u_hat, s_bar, v_hat)
    n = state.n + 1
    s_hat, sv_hat, sk_hat = _adam_coefficient_update(
        s_bar, sv_bar, sk_bar, grad_s, n, state.params
    )
    factors, s_v, s_k = truncate_adam(
        s_hat, sv_hat, sk_hat, u_hat, v_hat, policy
    )
    return factors, replace(state, s_v=s_v, s_k=s_k, n=n), loss


def lr_adam_naive_step(
    f: LowRankFactors,
    state: AdamState,
    oracle: GradientOracle,
    policy: TruncationPolicy,
) -> tuple[LowRankFactors, AdamState, float]:
    """Low-rank Adam that leaves both moments in stale bases.

    Moments are zero-padded into the augmented frame and cropped or padded
    to the truncated rank afterwards, without any change of basis.
    """

    _require_rank(f, state.s_v, state.s_k)
    _require_nonnegative(state.s_k)
    u_hat, v_hat, loss = _augment(f, oracle)
    size = u_hat.shape[1], v_hat.shape[1]
    s_bar = project_moment(u_hat, f, f.s, v_hat)
    sv_bar = pad_or_crop(state.s_v, *size)
    sk_bar = pad_or_crop(state.s_k, *size)
    grad_s = _coefficient_gradient(oracle, u_hat, s_bar, v_hat)
    n = state.n + 1
    s_hat, sv_hat, sk_hat = _adam_coefficient_update(
        s_bar, sv_bar, sk_bar, grad_s, n, state.params
    )
    factors = truncate_naive(s_hat, u_hat, v_hat, policy)
    r = factors.rank
    new_state = replace(
        state,
        s_v=pad_or_crop(sv_hat, r, r),
        s_k=pad_or_crop(sk_hat, r, r),
        n=n,
    )
    return factors, new_state, loss


def _lora_gradients(
    f: LowRankFactors, oracle: GradientOracle
) -> tuple[float, Matrix, Matrix, Matrix]:
    loss, grad_u, grad_v = oracle.grad_at_factors(f)
    _, grad_s = oracle.grad_at_coeff(f.u, f.s, f.v)
    _require_finite(grad_u, grad_v, grad_s)
    return loss, grad_u, grad_s, grad_v


def lora_adam_step(
    f: LowRankFactors, states: LoraStates, oracle: GradientOracle
) -> tuple[LowRankFactors, LoraStates, float]:
    """Adam applied to U, S and V independently, at fixed rank.

    U and V are not re-orthonormalized.
    """

    loss, grad_u, grad_s, grad_v = _lora_gradients(f, oracle)
    states = LoraStates(
        _adam_update(replace(states.u, w=f.u), grad_u),
        _adam_update(replace(states.s, w=f.s), grad_s),
        _adam_update(replace(states.v, w=f.v), grad_v),
    )
    return states.factors(), states, loss


def lora_hb_step(
    f: LowRankFactors, states: LoraStates, oracle: GradientOracle
) -> tuple[LowRankFactors, LoraStates, float]:
    """Heavy ball applied to U, S and V independently, at fixed rank."""
    loss, grad_u, grad_s, grad_v = _lora_gradients(f, oracle)
    states = LoraStates(
        _heavy_ball_update(replace(states.u, w=f.u), grad_u),
        _heavy_ball_update(replace(states.s, w=f.s), grad_s),
        _heavy_ball_update(replace(states.v, w=f.v), grad_v),
    )
    return states.factors(), states, loss
