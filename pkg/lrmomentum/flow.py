"""Continuous-time momentum flows on analytic losses.

Three flows are integrated with the classical fourth-order Runge-Kutta
scheme at a fixed step:

* the vanilla flow, in which U, S and V each carry their own heavy-ball
  momentum,
* the projected flow Ẇ = P(W)𝒱, 𝒱̇ + γ𝒱 = −P(W)∇L on a dense W,
* the factored flow, in which the momentum 𝒱 = U_𝒱 S_𝒱 V_𝒱ᵀ is evolved
  through its factors and S_𝒱 has to be inverted.

The module also holds the checks built on these flows: energy
dissipation, the stationary point of the vanilla flow that is no optimum,
the product-rule identity of the factored flow and the error scaling of
the discrete low-rank heavy-ball method against the projected flow.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from typing import Protocol, TypeVar

import numpy as np
import scipy.integrate
import scipy.linalg

from lrmomentum.data import gen_matrix_recovery
from lrmomentum.exceptions import NumericError, StiffnessError
from lrmomentum.linalg import (
    condition_number,
    frobenius_norm,
    orthonormalize,
    zeros,
)
from lrmomentum.lowrank import (
    LowRankFactors,
    TruncationPolicy,
    factor_gradients,
    factorize,
    naive_project,
    reconstruct,
    tangent_project,
)
from lrmomentum.net import MatrixRecovery
from lrmomentum.optim import (
    HeavyBallParams,
    HeavyBallState,
    WeightOracle,
    lr_hb_step,
)
from lrmomentum.report import CheckReport
from lrmomentum.types import Matrix

# cond(S_𝒱) above which the factored flow is rejected as stiff
STIFFNESS_THRESHOLD = 1e12

_State = TypeVar("_State")


class AnalyticLoss(Protocol):
    def value(self, w: Matrix) -> float:
        ...

    def gradient(self, w: Matrix) -> Matrix:
        ...


@dataclass(frozen=True)
class VanillaState:
    u: Matrix
    s: Matrix
    v: Matrix
    u_v: Matrix
    s_v: Matrix
    v_v: Matrix
    gamma: float
    t: float = 0.0

    def factors(self) -> LowRankFactors:
        return LowRankFactors(self.u, self.s, self.v)

    def momentum_factors(self) -> LowRankFactors:
        return LowRankFactors(self.u_v, self.s_v, self.v_v)

    def weight(self) -> Matrix:
        return reconstruct(self.factors())


@dataclass(frozen=True)
class ProjectedState:
    """Dense weight and momentum of the projected flow.

    The tangent space is taken at the rank-r truncated SVD of w. With
    full_rank=True the projection is the identity and the state follows
    the plain heavy-ball flow.
    """

    w: Matrix
    mom: Matrix
    rank: int
    gamma: float
    t: float = 0.0
    full_rank: bool = False


@dataclass(frozen=True)
class FactoredState:
    w: Matrix
    u_v: Matrix
    s_v: Matrix
    v_v: Matrix
    gamma: float
    t: float = 0.0
    condition: float = 1.0

    @property
    def rank(self) -> int:
        return int(self.s_v.shape[0])

    def momentum(self) -> Matrix:
        return np.linalg.multi_dot([self.u_v, self.s_v, self.v_v.T])


@dataclass(frozen=True)
class EnergyRecord:
    t: float
    energy: float
    momentum_sq: float
    residual: float


def _rk4(
    rate: Callable[[tuple[Matrix, ...]], tuple[Matrix, ...]],
    y: tuple[Matrix, ...],
    h: float,
) -> tuple[Matrix, ...]:
    def shifted(k: tuple[Matrix, ...], c: float) -> tuple[Matrix, ...]:
        return tuple(yi + c * ki for yi, ki in zip(y, k))

    k1 = rate(y)
    k2 = rate(shifted(k1, h / 2.0))
    k3 = rate(shifted(k2, h / 2.0))
    k4 = rate(shifted(k3, h))
    result = tuple(
        yi + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)
        for yi, a, b, c, d in zip(y, k1, k2, k3, k4)
    )
    if not all(np.all(np.isfinite(m)) for m in result):
        raise NumericError("flow state became non-finite")
    return result


def _require_step(h: float) -> None:
    if h <= 0.0:
        raise ValueError("step size must be > 0")


def step_vanilla_flow(
    s: VanillaState, loss: AnalyticLoss, h: float
) -> VanillaState:
    """One RK4 step of the coupled heavy-ball flows of U, S and V."""
    _require_step(h)
    gamma = s.gamma

    def rate(y: tuple[Matrix, ...]) -> tuple[Matrix, ...]:
        u, s_, v, u_v, s_v, v_v = y
        f = LowRankFactors(u, s_, v)
        grad_u, grad_v, grad_s = factor_gradients(
            f, loss.gradient(reconstruct(f))
        )
        return (
            u_v,
            s_v,
            v_v,
            -gamma * u_v - grad_u,
            -gamma * s_v - grad_s,
            -gamma * v_v - grad_v,
        )

    u, s_, v, u_v, s_v, v_v = _rk4(
        rate, (s.u, s.s, s.v, s.u_v, s.s_v, s.v_v), h
    )
    return replace(s, u=u, s=s_, v=v, u_v=u_v, s_v=s_v, v_v=v_v, t=s.t + h)


def naive_flow_rates(
    s: VanillaState, loss: AnalyticLoss
) -> tuple[Matrix, Matrix]:
    """Rates (Ẇ, 𝒱̇) of W = U S Vᵀ and 𝒱 = U_𝒱 S_𝒱 V_𝒱ᵀ.

    Ẇ = U_𝒱 S Vᵀ + U S_𝒱 Vᵀ + U S V_𝒱ᵀ and 𝒱̇ = −3γ𝒱 − P̂(W, 𝒱)∇L, where
    P̂ is the map computed by naive_project().
    """

    f = s.factors()
    mom = s.momentum_factors()
    w_dot = (
        np.linalg.multi_dot([s.u_v, s.s, s.v.T])
        + np.linalg.multi_dot([s.u, s.s_v, s.v.T])
        + np.linalg.multi_dot([s.u, s.s, s.v_v.T])
    )
    grad = loss.gradient(reconstruct(f))
    mom_dot = -3.0 * s.gamma * reconstruct(mom) - naive_project(f, mom, grad)
    return w_dot, mom_dot


def _projector(w: Matrix, rank: int) -> Callable[[Matrix], Matrix]:
    f = factorize(w, rank)
    return lambda z: tangent_project(f, z)


def projected_residual(s: ProjectedState, loss: AnalyticLoss) -> float:
    """‖P(W)∇L(W)‖_F, zero exactly at first-order optimal points."""
    grad = loss.gradient(s.w)
    if s.full_rank:
        return frobenius_norm(grad)
    return frobenius_norm(_projector(s.w, s.rank)(grad))


def step_projected_flow(
    s: ProjectedState, loss: AnalyticLoss, h: float
) -> ProjectedState:
    """One RK4 step of Ẇ = P(W)𝒱, 𝒱̇ = −γ𝒱 − P(W)∇L.

    The rank of W is not enforced between steps.
    """

    _require_step(h)
    gamma = s.gamma

    def rate(y: tuple[Matrix, ...]) -> tuple[Matrix, ...]:
        w, mom = y
        grad = loss.gradient(w)
        if s.full_rank:
            return mom, -gamma * mom - grad
        project = _projector(w, s.rank)
        return project(mom), -gamma * mom - project(grad)

    w, mom = _rk4(rate, (s.w, s.mom), h)
    return replace(s, w=w, mom=mom, t=s.t + h)


def energy_record(s: ProjectedState, loss: AnalyticLoss) -> EnergyRecord:
    momentum_sq = float(np.sum(s.mom**2))
    return EnergyRecord(
        t=s.t,
        energy=loss.value(s.w) + 0.5 * momentum_sq,
        momentum_sq=momentum_sq,
        residual=projected_residual(s, loss),
    )


def _factored_rates(
    u_v: Matrix,
    s_v: Matrix,
    v_v: Matrix,
    grad: Matrix,
    gamma: float,
    max_condition: float,
) -> tuple[Matrix, Matrix, Matrix]:
    condition = condition_number(s_v)
    if condition > max_condition:
        raise StiffnessError(condition)
    g_v = grad @ v_v
    gt_u = grad.T @ u_v
    # (I − U Uᵀ) G V S⁻¹ and (I − V Vᵀ) Gᵀ U S⁻ᵀ through linear solves
    u_dot = -scipy.linalg.solve(s_v.T, (g_v - u_v @ (u_v.T @ g_v)).T).T
    v_dot = -scipy.linalg.solve(s_v, (gt_u - v_v @ (v_v.T @ gt_u)).T).T
    s_dot = -gamma * s_v - u_v.T @ g_v
    return u_dot, s_dot, v_dot


def factored_momentum_rate(
    s: FactoredState,
    loss: AnalyticLoss,
    max_condition: float = STIFFNESS_THRESHOLD,
) -> tuple[Matrix, Matrix, Matrix]:
    """Return (U̇_𝒱, Ṡ_𝒱, V̇_𝒱) at the given state.

    Raises StiffnessError when cond(S_𝒱) exceeds max_condition.
    """

    return _factored_rates(
        s.u_v, s.s_v, s.v_v, loss.gradient(s.w), s.gamma, max_condition
    )


def step_factored_momentum_flow(
    s: FactoredState,
    loss: AnalyticLoss,
    h: float,
    max_condition: float = STIFFNESS_THRESHOLD,
) -> FactoredState:
    """One RK4 step of the factored momentum flow.

    The weight follows Ẇ = P(W)𝒱 with P taken at the rank-r truncation of
    W, r being the momentum rank. Every stage checks cond(S_𝒱).
    """

    _require_step(h)
    gamma = s.gamma
    rank = s.rank

    def rate(y: tuple[Matrix, ...]) -> tuple[Matrix, ...]:
        w, u_v, s_v, v_v = y
        grad = loss.gradient(w)
        u_dot, s_dot, v_dot = _factored_rates(
            u_v, s_v, v_v, grad, gamma, max_condition
        )
        mom = np.linalg.multi_dot([u_v, s_v, v_v.T])
        return _projector(w, rank)(mom), u_dot, s_dot, v_dot

    w, u_v, s_v, v_v = _rk4(rate, (s.w, s.u_v, s.s_v, s.v_v), h)
    condition = condition_number(s_v)
    if condition > max_condition:
        raise StiffnessError(condition)
    return replace(
        s, w=w, u_v=u_v, s_v=s_v, v_v=v_v, t=s.t + h, condition=condition
    )


def integrate(
    step: Callable[[_State, AnalyticLoss, float], _State],
    state: _State,
    loss: AnalyticLoss,
    h: float,
    horizon: float,
    record: Callable[[_State, AnalyticLoss], EnergyRecord] | None = None,
) -> tuple[_State, list[EnergyRecord]]:
    """Advance state by fixed steps of size h until t = horizon.

    With a record callback, the trace holds one record for the initial
    state and one after every step.
    """

    _require_step(h)
    steps = int(round(horizon / h))
    if steps < 0 or abs(steps * h - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a non-negative multiple of h")
    trace: list[EnergyRecord] = []
    if record is not None:
        trace.append(record(state, loss))
    for _ in range(steps):
        state = step(state, loss, h)
        if record is not None:
            trace.append(record(state, loss))
    return state, trace


def verify_energy_dissipation(
    trace: Sequence[EnergyRecord],
    gamma: float,
    slack: float = 1e-10,
    rtol: float = 1e-4,
) -> CheckReport:
    """Check that E(t) never increases and that E(T) − E(0) = −γ∫‖𝒱‖²dt.

    The integral is evaluated with Simpson's rule over the recorded times.
    A trace of fewer than two records passes vacuously.
    """

    name = "energy-dissipation"
    if len(trace) < 2:
        return CheckReport(name, True, "trace too short to check")
    energies = np.array([r.energy for r in trace])
    increases = np.flatnonzero(np.diff(energies) > slack)
    if len(increases) > 0:
        index = int(increases[0]) + 1
        return CheckReport(
            name,
            False,
            "energy increases at record {}".format(index),
            {"first_violation": float(index)},
        )
    times = np.array([r.t for r in trace])
    momentum_sq = np.array([r.momentum_sq for r in trace])
    dissipated = gamma * float(scipy.integrate.simpson(momentum_sq, x=times))
    change = float(energies[-1] - energies[0])
    scale = max(
        abs(change), dissipated, abs(energies[0]), np.finfo(float).tiny
    )
    error = abs(change + dissipated) / scale
    values = {
        "energy_change": change,
        "dissipated": dissipated,
        "relative_error": error,
    }
    if error > rtol:
        return CheckReport(
            name, False, "dissipation identity violated", values
        )
    return CheckReport(name, True, "", values)


def counterexample_point() -> tuple[LowRankFactors, LowRankFactors, Matrix]:
    """A point where the naive momentum flow is stationary at a non-optimum.

    Returns the weight factors U = V = e₁, S = [[1]], the momentum
    factors (−U, 0, V) and the gradient [[0, 0], [1, 0]].
    """

    e1 = np.array([[1.0], [0.0]])
    f = LowRankFactors(e1, np.array([[1.0]]), e1)
    mom = LowRankFactors(-e1, np.array([[0.0]]), e1)
    grad = np.array([[0.0, 0.0], [1.0, 0.0]])
    return f, mom, grad


def counterexample_check(lr: float = 0.1, gamma: float = 0.1) -> CheckReport:
    """Show that naive momentum stalls where the projected method moves."""
    name = "counterexample"
    f, mom, grad = counterexample_point()
    loss = MatrixRecovery(reconstruct(f) - grad)
    naive = naive_project(f, mom, grad)
    tangent = frobenius_norm(tangent_project(f, grad))
    vanilla = VanillaState(
        f.u, f.s, f.v, mom.u, mom.s, mom.v, gamma=gamma
    )
    w_dot, mom_dot = naive_flow_rates(vanilla, loss)
    oracle = WeightOracle(loss.loss_and_grad)
    state = HeavyBallState.zero(1, HeavyBallParams(lr=lr, gamma=gamma))
    policy = TruncationPolicy(tau=0.0, r_min=1, r_max=1)
    stepped, _, before = lr_hb_step(f, state, oracle, policy)
    after = loss.value(reconstruct(stepped))
    values = {
        "naive_max": float(np.max(np.abs(naive))),
        "tangent_norm": tangent,
        "naive_rate_max": float(
            max(np.max(np.abs(w_dot)), np.max(np.abs(mom_dot)))
        ),
        "loss_before": before,
        "loss_after": after,
    }
    problems = []
    if values["naive_max"] > 1e-14:
        problems.append("naive projection does not vanish")
    if abs(tangent - 1.0) > 1e-12:
        problems.append("tangent projection norm differs from 1")
    if values["naive_rate_max"] > 1e-14:
        problems.append("naive flow is not stationary")
    if not after < before:
        problems.append("low-rank heavy ball does not decrease the loss")
    return CheckReport(name, not problems, "; ".join(problems), values)


def _random_orthonormal(
    rng: np.random.Generator, n: int, rank: int
) -> Matrix:
    return orthonormalize(rng.standard_normal((n, rank)))


def random_factored_state(
    rng: np.random.Generator, n: int, rank: int, gamma: float
) -> FactoredState:
    """Factored state with singular values of S_𝒱 in [0.5, 2]."""
    sigma = rng.uniform(0.5, 2.0, size=rank)
    s_v = (
        _random_orthonormal(rng, rank, rank)
        * sigma
        @ _random_orthonormal(rng, rank, rank).T
    )
    return FactoredState(
        w=rng.standard_normal((n, n)),
        u_v=_random_orthonormal(rng, n, rank),
        s_v=s_v,
        v_v=_random_orthonormal(rng, n, rank),
        gamma=gamma,
    )


def check_factored_identity(
    n: int = 8,
    rank: int = 3,
    samples: int = 100,
    gamma: float = 0.5,
    seed: int = 0,
    tol: float = 1e-8,
) -> CheckReport:
    """Product-rule check of the factored momentum flow.

    At random well-conditioned states, U̇ S Vᵀ + U Ṡ Vᵀ + U S V̇ᵀ has to
    equal −γ𝒱 − P(𝒱)∇L.
    """

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        s = random_factored_state(rng, n, rank, gamma)
        loss = MatrixRecovery(rng.standard_normal((n, n)))
        u_dot, s_dot, v_dot = factored_momentum_rate(s, loss)
        assembled = (
            np.linalg.multi_dot([u_dot, s.s_v, s.v_v.T])
            + np.linalg.multi_dot([s.u_v, s_dot, s.v_v.T])
            + np.linalg.multi_dot([s.u_v, s.s_v, v_dot.T])
        )
        mom_f = LowRankFactors(s.u_v, s.s_v, s.v_v)
        expected = -gamma * s.momentum() - tangent_project(
            mom_f, loss.gradient(s.w)
        )
        error = frobenius_norm(assembled - expected) / frobenius_norm(
            expected
        )
        worst = max(worst, error)
    passed = worst <= tol
    message = "" if passed else "product rule identity violated"
    return CheckReport(
        "factored-identity", passed, message, {"max_relative_error": worst}
    )


def flow_vs_discrete(
    loss: MatrixRecovery,
    lr: float,
    horizon: float,
    init: LowRankFactors,
    gamma: float = 0.5,
    reference_divisor: int = 100,
) -> float:
    """Distance at t = horizon between the discrete and continuous method.

    The reference integrates the projected flow from W₀ = U S Vᵀ with zero
    momentum at step lr / reference_divisor. The discrete method runs the
    low-rank heavy ball at learning rate lr, damping lr · gamma and no
    rank adaptation.
    """

    steps = int(round(horizon / lr))
    if steps < 1 or abs(steps * lr - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a positive multiple of lr")
    rank = init.rank
    w0 = reconstruct(init)
    reference, _ = integrate(
        step_projected_flow,
        ProjectedState(w0, np.zeros_like(w0), rank, gamma),
        loss,
        lr / reference_divisor,
        horizon,
    )
    oracle = WeightOracle(loss.loss_and_grad)
    policy = TruncationPolicy(tau=0.0, r_min=rank, r_max=rank)
    state = HeavyBallState.zero(
        rank, HeavyBallParams(lr=lr, gamma=lr * gamma)
    )
    f = init
    for _ in range(steps):
        f, state, _ = lr_hb_step(f, state, oracle, policy)
    return frobenius_norm(reference.w - reconstruct(f))


@dataclass(frozen=True)
class ScalingStudy:
    lrs: tuple[float, ...]
    errors: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        """Error ratio of every learning rate to the next smaller one."""
        return tuple(a / b for a, b in zip(self.errors, self.errors[1:]))

    @property
    def constants(self) -> tuple[float, ...]:
        return tuple(e / lr for e, lr in zip(self.errors, self.lrs))


def error_scaling_study(
    lrs: Sequence[float] = (0.1, 0.05, 0.025),
    n: int = 8,
    true_rank: int = 2,
    condition: float = 2.0,
    gamma: float = 0.5,
    horizon: float = 1.0,
    seed: int = 0,
) -> ScalingStudy:
    """Run flow_vs_discrete() for several learning rates.

    The target has exact rank true_rank and the initial weight shares its
    singular vectors, so the gradient stays tangent along the whole
    trajectory. The initial coefficient has singular values spaced
    geometrically from 1 down to 1 / condition.
    """

    loss = gen_matrix_recovery(n, true_rank, seed=seed)
    target = factorize(loss.target, true_rank)
    s0 = np.diag(np.geomspace(1.0, 1.0 / condition, true_rank))
    init = LowRankFactors(target.u, s0, target.v)
    errors = tuple(
        flow_vs_discrete(loss, lr, horizon, init, gamma) for lr in lrs
    )
    return ScalingStudy(tuple(lrs), errors)


def start_projected(
    loss: MatrixRecovery,
    rank: int,
    gamma: float,
    perturbation: float = 0.05,
    seed: int = 0,
) -> ProjectedState:
    """Projected-flow state near the rank-r optimum of a recovery loss.

    The weight is the rank-r truncation of the optimum plus a random
    tangent perturbation of the given Frobenius norm; the momentum starts
    at zero.
    """

    f = factorize(loss.target, rank)
    rng = np.random.default_rng(seed)
    direction = tangent_project(f, rng.standard_normal(loss.target.shape))
    direction *= perturbation / frobenius_norm(direction)
    w0 = reconstruct(factorize(reconstruct(f) + direction, rank))
    return ProjectedState(w0, zeros(*w0.shape), rank, gamma)


def energy_study(
    n: int = 16,
    rank: int = 2,
    gamma: float = 0.5,
    h: float = 1e-2,
    horizon: float = 50.0,
    seed: int = 0,
) -> tuple[list[EnergyRecord], list[CheckReport]]:
    """Integrate the projected flow towards a rank-r target.

    Returns the energy trace together with the dissipation check and the
    stationarity check ‖P(W)∇L‖_F <= 1e-6 at the final time.
    """

    loss = gen_matrix_recovery(n, rank, seed=seed)
    state = start_projected(loss, rank, gamma, seed=seed)
    _, trace = integrate(
        step_projected_flow, state, loss, h, horizon, energy_record
    )
    residual = trace[-1].residual
    stationary = residual <= 1e-6
    reports = [
        verify_energy_dissipation(trace, gamma),
        CheckReport(
            "stationarity",
            stationary,
            "" if stationary else "projected gradient did not vanish",
            {"residual": residual},
        ),
    ]
    return trace, reports


def scaling_check(
    lrs: Sequence[float] = (0.1, 0.05, 0.025),
    condition: float = 1e6,
    seed: int = 0,
) -> tuple[ScalingStudy, ScalingStudy, CheckReport]:
    """Error scaling in the learning rate, also for an ill-conditioned S.

    Every halving of the learning rate has to shrink the error by a factor
    in [1.33, 3], and the error constants of a start with condition
    number `condition` may differ from a well-conditioned start by less
    than a factor of 10.
    """

    well = error_scaling_study(lrs, seed=seed)
    ill = error_scaling_study(lrs, condition=condition, seed=seed)
    problems = []
    for study, label in ((well, "well"), (ill, "ill")):
        if not all(1.33 <= r <= 3.0 for r in study.ratios):
            problems.append("{}-conditioned ratios out of range".format(label))
    spread = max(
        max(a / b, b / a) for a, b in zip(well.constants, ill.constants)
    )
    if not spread < 10.0:
        problems.append("error constants depend on conditioning")
    values = {"constant_spread": spread}
    for i, ratio in enumerate(well.ratios):
        values["ratio_{}".format(i)] = ratio
    for i, ratio in enumerate(ill.ratios):
        values["ill_ratio_{}".format(i)] = ratio
    report = CheckReport(
        "error-scaling", not problems, "; ".join(problems), values
    )
    return well, ill, report
