from __future__ import annotations

import numpy as np
import pytest
from asserts import (
    assert_almost_equal,
    assert_equal,
    assert_greater,
    assert_less,
    assert_less_equal,
    assert_raises,
    assert_true,
)
from dectest import TestCase, before, test

from lrmomentum.data import gen_matrix_recovery
from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.flow import counterexample_point
from lrmomentum.linalg import frobenius_norm, orthonormality_error
from lrmomentum.lowrank import (
    LowRankFactors,
    TruncationPolicy,
    factor_gradients,
    factorize,
    reconstruct,
    tangent_project,
)
from lrmomentum.net import MatrixRecovery
from lrmomentum.optim import (
    AdamParams,
    AdamState,
    FullState,
    HeavyBallParams,
    HeavyBallState,
    LoraStates,
    WeightOracle,
    adam_full_step,
    hb_full_step,
    linear_decay,
    lora_adam_step,
    lora_hb_step,
    lr_adam_naive_step,
    lr_adam_step,
    lr_hb_naive_step,
    lr_hb_step,
    optimizer_state_size,
)
from lrmomentum.types import Matrix
from lrmomentum_test.testutil import (
    assert_matrix_close,
    assert_orthonormal,
    quadratic_oracle,
    random_lowrank,
    rng,
)


def constant_oracle(value: float) -> WeightOracle:
    def loss_and_grad(w: Matrix) -> tuple[float, Matrix]:
        return 0.0, np.full_like(w, value)

    return WeightOracle(loss_and_grad)


def nan_oracle() -> WeightOracle:
    return constant_oracle(float("nan"))


class ParamsTest(TestCase):
    @test
    def heavy_ball_defaults(self) -> None:
        assert_equal(0.1, HeavyBallParams(lr=0.01).gamma)

    @test
    def adam_defaults(self) -> None:
        params = AdamParams(lr=0.001)
        assert_equal(0.9, params.beta1)
        assert_equal(0.999, params.beta2)
        assert_equal(1e-8, params.eps)
        assert_equal(0.0, params.weight_decay)

    @test
    def invalid_heavy_ball(self) -> None:
        with assert_raises(ValueError):
            HeavyBallParams(lr=-1.0)
        with assert_raises(ValueError):
            HeavyBallParams(lr=0.1, gamma=1.5)

    @test
    def invalid_adam(self) -> None:
        with assert_raises(ValueError):
            AdamParams(lr=0.1, beta1=1.0)
        with assert_raises(ValueError):
            AdamParams(lr=0.1, beta2=-0.1)
        with assert_raises(ValueError):
            AdamParams(lr=0.1, eps=0.0)
        with assert_raises(ValueError):
            AdamParams(lr=0.1, weight_decay=-1.0)


class HeavyBallFullStepTest(TestCase):
    @test
    def hand_computed(self) -> None:
        state = FullState.start(
            np.array([[1.0]]), HeavyBallParams(lr=0.5, gamma=0.1)
        )
        state, _ = hb_full_step(state, constant_oracle(2.0))
        assert_equal([[-1.0]], state.v.tolist())
        assert_equal([[0.5]], state.w.tolist())
        assert_equal(None, state.k)

    @test
    def full_decay_resets_velocity(self) -> None:
        params = HeavyBallParams(lr=0.5, gamma=1.0)
        state = FullState(
            np.zeros((2, 2)), np.full((2, 2), 7.0), None, 0, params
        )
        state, _ = hb_full_step(state, constant_oracle(2.0))
        assert_equal(np.full((2, 2), -1.0).tolist(), state.v.tolist())

    @test
    def zero_gradient_coasts(self) -> None:
        params = HeavyBallParams(lr=0.5, gamma=0.0)
        v = np.array([[1.0, -2.0]])
        state = FullState(np.zeros((1, 2)), v, None, 0, params)
        state, _ = hb_full_step(state, constant_oracle(0.0))
        assert_equal([[1.0, -2.0]], state.v.tolist())
        assert_equal([[0.5, -1.0]], state.w.tolist())

    @test
    def returns_loss_before_the_step(self) -> None:
        target = np.eye(2)
        state = FullState.start(np.zeros((2, 2)), HeavyBallParams(lr=0.1))
        _, loss = hb_full_step(state, quadratic_oracle(target))
        assert_equal(1.0, loss)

    @test
    def non_finite_gradient(self) -> None:
        state = FullState.start(np.zeros((2, 2)), HeavyBallParams(lr=0.1))
        with assert_raises(NumericError):
            hb_full_step(state, nan_oracle())
        assert_equal(np.zeros((2, 2)).tolist(), state.w.tolist())

    @test
    def rejects_adam_params(self) -> None:
        state = FullState.start(np.zeros((2, 2)), AdamParams(lr=0.1))
        with assert_raises(TypeError):
            hb_full_step(state, constant_oracle(1.0))


class AdamFullStepTest(TestCase):
    @test
    def first_step_is_sign_step(self) -> None:
        state = FullState.start(np.array([[1.0, 1.0]]), AdamParams(lr=0.1))
        oracle = WeightOracle(lambda w: (0.0, np.array([[2.0, -0.5]])))
        state, _ = adam_full_step(state, oracle)
        assert_equal(1, state.n)
        assert_almost_equal(0.9, state.w[0, 0], places=7)
        assert_almost_equal(1.1, state.w[0, 1], places=7)
        assert_true(state.k is not None and np.all(state.k >= 0.0))

    @test
    def converges_on_quadratic(self) -> None:
        target = rng(1).standard_normal((4, 3))
        oracle = quadratic_oracle(target)
        state = FullState.start(np.zeros((4, 3)), AdamParams(lr=0.05))
        for _ in range(500):
            state, _ = adam_full_step(state, oracle)
        assert_less(
            frobenius_norm(state.w - target), 0.1 * frobenius_norm(target)
        )

    @test
    def decoupled_weight_decay(self) -> None:
        w = np.array([[2.0]])
        plain = FullState.start(w, AdamParams(lr=0.1))
        decayed = FullState.start(w, AdamParams(lr=0.1, weight_decay=0.5))
        oracle = constant_oracle(1.0)
        plain, _ = adam_full_step(plain, oracle)
        decayed, _ = adam_full_step(decayed, oracle)
        assert_almost_equal(
            0.1 * 0.5 * 2.0, plain.w[0, 0] - decayed.w[0, 0], places=14
        )

    @test
    def rejects_heavy_ball_params(self) -> None:
        state = FullState.start(np.zeros((2, 2)), HeavyBallParams(lr=0.1))
        with assert_raises(TypeError):
            adam_full_step(state, constant_oracle(1.0))

    @test
    def moment_shapes_are_checked(self) -> None:
        with assert_raises(ShapeError):
            FullState(
                np.zeros((2, 2)),
                np.zeros((2, 3)),
                None,
                0,
                HeavyBallParams(lr=0.1),
            )


class WeightOracleTest(TestCase):
    @test
    def coefficient_gradient_matches_factor_gradients(self) -> None:
        g = rng(2)
        f = random_lowrank(g, 6, 5, 2)
        target = g.standard_normal((6, 5))
        oracle = quadratic_oracle(target)
        loss, grad_s = oracle.grad_at_coeff(f.u, f.s, f.v)
        grad_u, grad_v, expected_s = factor_gradients(
            f, reconstruct(f) - target
        )
        assert_matrix_close(expected_s, grad_s)
        _, oracle_u, oracle_v = oracle.grad_at_factors(f)
        assert_matrix_close(grad_u, oracle_u)
        assert_matrix_close(grad_v, oracle_v)
        assert_almost_equal(
            0.5 * frobenius_norm(reconstruct(f) - target) ** 2,
            loss,
            places=12,
        )


class LowRankHeavyBallTest(TestCase):
    @before
    def setup_problem(self) -> None:
        self.rng = rng(3)
        self.target = self.rng.standard_normal((8, 6))
        self.oracle = quadratic_oracle(self.target)
        self.params = HeavyBallParams(lr=0.1, gamma=0.1)

    @test
    def full_rank_matches_dense_heavy_ball(self) -> None:
        n = 6
        target = self.rng.standard_normal((n, n))
        oracle = quadratic_oracle(target)
        w0 = self.rng.standard_normal((n, n)) / np.sqrt(n)
        full = FullState.start(w0, self.params)
        f = factorize(w0, n)
        state = HeavyBallState.zero(n, self.params)
        policy = TruncationPolicy(tau=0.0, r_min=n, r_max=n)
        for _ in range(20):
            full, dense_loss = hb_full_step(full, oracle)
            f, state, loss = lr_hb_step(f, state, oracle, policy)
            assert_almost_equal(dense_loss, loss, places=9)
        assert_matrix_close(full.w, reconstruct(f), rtol=1e-10)

    @test
    def momentum_follows_the_rank(self) -> None:
        f = random_lowrank(self.rng, 8, 6, 2)
        state = HeavyBallState.zero(2, self.params)
        policy = TruncationPolicy(tau=0.05, r_min=1)
        for _ in range(10):
            f, state, _ = lr_hb_step(f, state, self.oracle, policy)
            assert_equal((f.rank, f.rank), state.s_v.shape)
            assert_orthonormal(f.u)
            assert_orthonormal(f.v)

    @test
    def decreases_the_loss(self) -> None:
        f = random_lowrank(self.rng, 8, 6, 2)
        state = HeavyBallState.zero(2, self.params)
        policy = TruncationPolicy(tau=0.01, r_min=1)
        first = None
        for _ in range(50):
            f, state, loss = lr_hb_step(f, state, self.oracle, policy)
            if first is None:
                first = loss
        assert first is not None
        assert_less(self.oracle.grad_w(reconstruct(f))[0], first)

    @test
    def state_rank_mismatch(self) -> None:
        f = random_lowrank(self.rng, 8, 6, 2)
        state = HeavyBallState.zero(3, self.params)
        with assert_raises(ShapeError):
            lr_hb_step(f, state, self.oracle, TruncationPolicy())

    @test
    def non_finite_gradient_leaves_inputs(self) -> None:
        f = random_lowrank(self.rng, 8, 6, 2)
        s = f.s.copy()
        state = HeavyBallState.zero(2, self.params)
        with assert_raises(NumericError):
            lr_hb_step(f, state, nan_oracle(), TruncationPolicy())
        assert_true(np.array_equal(s, f.s))
        assert_equal(np.zeros((2, 2)).tolist(), state.s_v.tolist())

    @test
    def naive_variant_keeps_shapes(self) -> None:
        f = random_lowrank(self.rng, 8, 6, 2)
        state = HeavyBallState.zero(2, self.params)
        policy = TruncationPolicy(tau=0.05, r_min=1)
        for _ in range(10):
            f, state, _ = lr_hb_naive_step(f, state, self.oracle, policy)
            assert_equal((f.rank, f.rank), state.s_v.shape)


class LowRankAdamTest(TestCase):
    @before
    def setup_problem(self) -> None:
        self.rng = rng(4)
        self.target = self.rng.standard_normal((10, 10))
        self.oracle = quadratic_oracle(self.target)
        self.params = AdamParams(lr=0.01)

    @test
    def second_moment_stays_nonnegative(self) -> None:
        f = random_lowrank(self.rng, 10, 10, 3)
        state = AdamState.zero(3, self.params)
        policy = TruncationPolicy(tau=0.05, r_min=1)
        for step in range(30):
            f, state, _ = lr_adam_step(f, state, self.oracle, policy)
            assert_equal(step + 1, state.n)
            assert_equal((f.rank, f.rank), state.s_k.shape)
            assert_true(np.all(state.s_k >= 0.0))

    @test
    def negative_second_moment_is_rejected(self) -> None:
        f = random_lowrank(self.rng, 10, 10, 2)
        state = AdamState(
            np.zeros((2, 2)), -np.ones((2, 2)), 0, self.params
        )
        with assert_raises(NumericError):
            lr_adam_step(f, state, self.oracle, TruncationPolicy())

    @test
    def recovers_a_low_rank_target(self) -> None:
        g = rng(5)
        u = np.linalg.qr(g.standard_normal((12, 2)))[0]
        v = np.linalg.qr(g.standard_normal((12, 2)))[0]
        target = u @ np.diag([2.0, 1.0]) @ v.T
        oracle = quadratic_oracle(target)
        f = random_lowrank(g, 12, 12, 4)
        state = AdamState.zero(4, AdamParams(lr=0.02))
        policy = TruncationPolicy(tau=0.05, r_min=1)
        for _ in range(600):
            f, state, _ = lr_adam_step(f, state, oracle, policy)
        error = frobenius_norm(reconstruct(f) - target)
        assert_less(error, 0.2 * frobenius_norm(target))
        assert_orthonormal(f.u)

    @test
    def naive_variant_keeps_shapes(self) -> None:
        f = random_lowrank(self.rng, 10, 10, 3)
        state = AdamState.zero(3, self.params)
        policy = TruncationPolicy(tau=0.05, r_min=1)
        for step in range(10):
            f, state, _ = lr_adam_naive_step(f, state, self.oracle, policy)
            assert_equal(step + 1, state.n)
            assert_equal((f.rank, f.rank), state.s_v.shape)
            assert_equal((f.rank, f.rank), state.s_k.shape)
            assert_true(np.all(state.s_k >= 0.0))


class AdamStabilityTest(TestCase):
    @test
    def fixed_rank_run_from_dense_initialization(self) -> None:
        oracle = WeightOracle(gen_matrix_recovery(16, 3, seed=2).loss_and_grad)
        f = factorize(rng(7).standard_normal((16, 16)) / 4.0, 8)
        state = AdamState.zero(8, AdamParams(lr=0.01))
        policy = TruncationPolicy(fixed_rank=8)
        losses: list[float] = []
        for _ in range(300):
            f, state, loss = lr_adam_step(f, state, oracle, policy)
            losses.append(loss)
        assert_equal(8, f.rank)
        assert_true(np.all(np.isfinite(losses)))
        assert_less_equal(max(losses), losses[0])
        assert_less(losses[-1], 0.05 * losses[0])

    @test
    def zero_gradient_keeps_the_weight(self) -> None:
        f = random_lowrank(rng(8), 9, 7, 2)
        w = reconstruct(f)
        state = AdamState.zero(2, AdamParams(lr=0.1))
        policy = TruncationPolicy(tau=0.0, r_min=2, r_max=2)
        for _ in range(5):
            f, state, _ = lr_adam_step(f, state, constant_oracle(0.0), policy)
        assert_matrix_close(w, reconstruct(f))
        assert_equal(np.zeros((2, 2)).tolist(), state.s_k.tolist())


class NaiveAdamTest(TestCase):
    @before
    def setup_problem(self) -> None:
        self.rng = rng(9)
        self.oracle = quadratic_oracle(self.rng.standard_normal((10, 10)))
        self.params = AdamParams(lr=0.05)
        self.policy = TruncationPolicy(tau=0.05, r_min=1)

    @test
    def first_step_matches_projected_step(self) -> None:
        f = random_lowrank(self.rng, 10, 10, 3)
        state = AdamState.zero(3, self.params)
        projected, _, loss = lr_adam_step(f, state, self.oracle, self.policy)
        naive, naive_state, naive_loss = lr_adam_naive_step(
            f, state, self.oracle, self.policy
        )
        assert_equal(loss, naive_loss)
        assert_equal(1, naive_state.n)
        assert_matrix_close(reconstruct(projected), reconstruct(naive))

    @test
    def trajectories_separate_once_bases_rotate(self) -> None:
        projected = naive = random_lowrank(self.rng, 10, 10, 3)
        state = naive_state = AdamState.zero(3, self.params)
        for _ in range(5):
            projected, state, _ = lr_adam_step(
                projected, state, self.oracle, self.policy
            )
            naive, naive_state, _ = lr_adam_naive_step(
                naive, naive_state, self.oracle, self.policy
            )
        difference = reconstruct(projected) - reconstruct(naive)
        assert_greater(frobenius_norm(difference), 1e-6)

    @test
    def stale_moment_stalls_at_the_counterexample(self) -> None:
        f, _, grad = counterexample_point()
        loss = MatrixRecovery(reconstruct(f) - grad)
        oracle = WeightOracle(loss.loss_and_grad)
        params = AdamParams(lr=0.1)
        # in the augmented frame G_S = e₁e₁ᵀ, which this moment cancels
        s_v = np.array([[-(1.0 - params.beta1) / params.beta1]])
        state = AdamState(s_v, np.array([[0.01]]), 1, params)
        policy = TruncationPolicy(tau=0.0, r_min=1, r_max=1)
        naive, _, _ = lr_adam_naive_step(f, state, oracle, policy)
        projected, _, _ = lr_adam_step(f, state, oracle, policy)
        assert_matrix_close(reconstruct(f), reconstruct(naive))
        assert_greater(
            frobenius_norm(reconstruct(projected) - reconstruct(f)), 1e-3
        )


class HeavyBallConvergenceTest(TestCase):
    @test
    def rank_one_diagonal_target(self) -> None:
        n = 4
        target = np.zeros((n, n))
        target[0, 0] = 1.0
        oracle = quadratic_oracle(target)
        e1 = np.eye(n)[:, :1]
        f = LowRankFactors(e1, np.array([[0.5]]), e1)
        state = HeavyBallState.zero(1, HeavyBallParams(lr=0.1, gamma=0.9))
        policy = TruncationPolicy(tau=0.0, r_min=1, r_max=1)

        def residual() -> float:
            _, grad = oracle.grad_w(reconstruct(f))
            return frobenius_norm(tangent_project(f, grad))

        start = residual()
        # the slow mode contracts by about 0.9889 per step
        for _ in range(500):
            f, state, _ = lr_hb_step(f, state, oracle, policy)
        assert_less(residual(), 1e-2 * start)
        for _ in range(1000):
            f, state, _ = lr_hb_step(f, state, oracle, policy)
        assert_less_equal(residual(), 1e-6)

    @test
    def zero_learning_rate_changes_nothing(self) -> None:
        g = rng(10)
        f = random_lowrank(g, 8, 6, 2)
        params = HeavyBallParams(lr=0.0, gamma=0.0)
        state = HeavyBallState(g.standard_normal((2, 2)), params)
        oracle = quadratic_oracle(g.standard_normal((8, 6)))
        policy = TruncationPolicy(tau=0.0, r_min=2, r_max=2)
        stepped, new_state, _ = lr_hb_step(f, state, oracle, policy)
        assert_matrix_close(reconstruct(f), reconstruct(stepped))
        assert_matrix_close(
            f.u @ state.s_v @ f.v.T,
            stepped.u @ new_state.s_v @ stepped.v.T,
        )


class LoraTest(TestCase):
    @before
    def setup_problem(self) -> None:
        self.rng = rng(6)
        self.target = self.rng.standard_normal((7, 5))
        self.oracle = quadratic_oracle(self.target)

    @test
    def adam_keeps_the_rank(self) -> None:
        f = random_lowrank(self.rng, 7, 5, 2)
        states = LoraStates.start(f, AdamParams(lr=0.01))
        for _ in range(5):
            f, states, _ = lora_adam_step(f, states, self.oracle)
        assert_equal(2, f.rank)
        assert_equal(5, states.s.n)
        assert_true(np.array_equal(states.factors().s, f.s))

    @test
    def bases_lose_orthonormality(self) -> None:
        f = random_lowrank(self.rng, 7, 5, 2)
        states = LoraStates.start(f, AdamParams(lr=0.05))
        for _ in range(10):
            f, states, _ = lora_adam_step(f, states, self.oracle)
        assert_greater(orthonormality_error(f.u), 1e-4)
        assert_greater(orthonormality_error(f.v), 1e-4)

    @test
    def heavy_ball_decreases_the_loss(self) -> None:
        f = random_lowrank(self.rng, 7, 5, 2)
        states = LoraStates.start(f, HeavyBallParams(lr=0.05))
        _, _, first = lora_hb_step(f, states, self.oracle)
        for _ in range(100):
            f, states, _ = lora_hb_step(f, states, self.oracle)
        assert_equal(2, f.rank)
        assert_greater(first, self.oracle.grad_w(reconstruct(f))[0])


@pytest.mark.parametrize(
    "lr,step,max_steps,expected",
    [
        (0.1, 0, 10, 0.1),
        (0.1, 5, 10, 0.05),
        (0.1, 10, 10, 0.0),
        (0.1, 12, 10, 0.0),
        (0.1, 3, 0, 0.1),
    ],
)
def test_linear_decay(
    lr: float, step: int, max_steps: int, expected: float
) -> None:
    assert linear_decay(lr, step, max_steps) == pytest.approx(expected)


def test_optimizer_state_size() -> None:
    hb = HeavyBallParams(lr=0.1)
    adam = AdamParams(lr=0.1)
    f = random_lowrank(rng(), 6, 4, 3)
    assert optimizer_state_size(HeavyBallState.zero(3, hb)) == 9
    assert optimizer_state_size(AdamState.zero(3, adam)) == 18
    assert optimizer_state_size(FullState.start(np.zeros((6, 4)), hb)) == 24
    assert optimizer_state_size(FullState.start(np.zeros((6, 4)), adam)) == 48
    assert optimizer_state_size(LoraStates.start(f, hb)) == 18 + 9 + 12
