from __future__ import annotations

import numpy as np
import pytest
from asserts import (
    assert_almost_equal,
    assert_equal,
    assert_less_equal,
    assert_raises,
    assert_true,
)
from dectest import TestCase, before, test

from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.linalg import frobenius_norm, identity
from lrmomentum.lowrank import (
    LowRankFactors,
    TruncationPolicy,
    basis_augmentation,
    carry_second_moment,
    factor_gradients,
    factorize,
    naive_project,
    naive_project_terms,
    project_moment,
    project_second_moment,
    reconstruct,
    tangent_project,
    truncate_adam,
    truncate_hb,
    truncate_naive,
)
from lrmomentum_test.testutil import (
    assert_in_span,
    assert_matrix_close,
    assert_orthonormal,
    random_lowrank,
    random_orthonormal,
    rng,
)

E1 = np.array([[1.0], [0.0]])
E2 = np.array([[0.0], [1.0]])


def _unit(s: float) -> LowRankFactors:
    return LowRankFactors(E1, np.array([[s]]), E1)


class LowRankFactorsTest(TestCase):
    @test
    def rank_shape_and_parameters(self) -> None:
        f = random_lowrank(rng(), 10, 8, 2)
        assert_equal(2, f.rank)
        assert_equal((10, 8), f.shape)
        assert_equal(40, f.parameter_count)

    @test
    def coefficient_must_be_square(self) -> None:
        with assert_raises(ShapeError):
            LowRankFactors(np.ones((3, 2)), np.ones((2, 3)), np.ones((3, 2)))

    @test
    def empty_rank(self) -> None:
        with assert_raises(ShapeError):
            LowRankFactors(np.ones((3, 0)), np.ones((0, 0)), np.ones((3, 0)))

    @test
    def basis_width_must_match_rank(self) -> None:
        with assert_raises(ShapeError):
            LowRankFactors(np.ones((3, 1)), np.eye(2), np.ones((3, 2)))
        with assert_raises(ShapeError):
            LowRankFactors(np.ones((3, 2)), np.eye(2), np.ones((3, 1)))


class ReconstructTest(TestCase):
    @test
    def single_direction(self) -> None:
        w = reconstruct(_unit(3.0))
        assert_equal([[3.0, 0.0], [0.0, 0.0]], w.tolist())

    @test
    def zero_coefficient(self) -> None:
        w = reconstruct(_unit(0.0))
        assert_equal([[0.0, 0.0], [0.0, 0.0]], w.tolist())

    @test
    def diagonal(self) -> None:
        f = LowRankFactors(identity(2), np.diag([2.0, 1.0]), identity(2))
        assert_equal([[2.0, 0.0], [0.0, 1.0]], reconstruct(f).tolist())

    @test
    def factorize_recovers_full_rank_weight(self) -> None:
        w = rng(4).standard_normal((7, 5))
        f = factorize(w, 5)
        assert_matrix_close(w, reconstruct(f), rtol=1e-12)
        assert_orthonormal(f.u)
        assert_orthonormal(f.v)

    @test
    def factorize_rank_out_of_range(self) -> None:
        with assert_raises(ShapeError):
            factorize(np.ones((3, 2)), 3)
        with assert_raises(ShapeError):
            factorize(np.ones((3, 2)), 0)


class TangentProjectTest(TestCase):
    @before
    def setup_factors(self) -> None:
        self.rng = rng(21)
        self.f = random_lowrank(self.rng, 12, 9, 3)

    @test
    def hand_computed(self) -> None:
        z = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert_equal(
            [[1.0, 2.0], [3.0, 0.0]], tangent_project(_unit(1.0), z).tolist()
        )

    @test
    def tangent_vectors_are_fixed(self) -> None:
        z = self.f.u @ self.rng.standard_normal((3, 3)) @ self.f.v.T
        assert_matrix_close(z, tangent_project(self.f, z))

    @test
    def normal_component_is_annihilated(self) -> None:
        z = np.array([[0.0, 0.0], [0.0, 5.0]])
        assert_equal(
            [[0.0, 0.0], [0.0, 0.0]], tangent_project(_unit(1.0), z).tolist()
        )

    @test
    def idempotent(self) -> None:
        z = self.rng.standard_normal((12, 9))
        once = tangent_project(self.f, z)
        twice = tangent_project(self.f, once)
        assert_less_equal(
            frobenius_norm(twice - once), 1e-12 * frobenius_norm(z)
        )

    @test
    def self_adjoint(self) -> None:
        a = self.rng.standard_normal((12, 9))
        b = self.rng.standard_normal((12, 9))
        left = float(np.sum(tangent_project(self.f, a) * b))
        right = float(np.sum(a * tangent_project(self.f, b)))
        assert_almost_equal(left, right, places=10)

    @test
    def ambient_shape_is_checked(self) -> None:
        with assert_raises(ShapeError):
            tangent_project(self.f, np.ones((9, 12)))


class NaiveProjectTest(TestCase):
    @test
    def identity_factors_triple_the_input(self) -> None:
        n = 3
        f = LowRankFactors(identity(n), identity(n), identity(n))
        z = rng(1).standard_normal((n, n))
        assert_matrix_close(3.0 * z, naive_project(f, f, z))

    @test
    def zero_input(self) -> None:
        f = random_lowrank(rng(2), 5, 4, 2)
        assert_equal(
            np.zeros((5, 4)).tolist(),
            naive_project(f, f, np.zeros((5, 4))).tolist(),
        )

    @test
    def vanishes_where_tangent_projection_does_not(self) -> None:
        f = _unit(1.0)
        mom = LowRankFactors(-E1, np.zeros((1, 1)), E1)
        z = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert_equal(
            [[0.0, 0.0], [0.0, 0.0]], np.abs(naive_project(f, mom, z)).tolist()
        )
        assert_almost_equal(
            1.0, frobenius_norm(tangent_project(f, z)), places=12
        )

    @test
    def terms_sum_to_projection(self) -> None:
        g = rng(3)
        f = random_lowrank(g, 6, 5, 2)
        mom = random_lowrank(g, 6, 5, 2)
        z = g.standard_normal((6, 5))
        first, second, third = naive_project_terms(f, mom, z)
        assert_matrix_close(naive_project(f, mom, z), first + second + third)

    @test
    def momentum_rank_must_match(self) -> None:
        g = rng(4)
        f = random_lowrank(g, 6, 5, 2)
        mom = random_lowrank(g, 6, 5, 3)
        with assert_raises(ShapeError):
            naive_project(f, mom, np.zeros((6, 5)))


class FactorGradientsTest(TestCase):
    @test
    def hand_computed(self) -> None:
        f = LowRankFactors(E1, np.array([[2.0]]), E1)
        grad_u, grad_v, grad_s = factor_gradients(f, identity(2))
        assert_equal([[2.0], [0.0]], grad_u.tolist())
        assert_equal([[2.0], [0.0]], grad_v.tolist())
        assert_equal([[1.0]], grad_s.tolist())

    @test
    def zero_gradient(self) -> None:
        f = random_lowrank(rng(5), 4, 3, 2)
        for grad in factor_gradients(f, np.zeros((4, 3))):
            assert_true(not np.any(grad))

    @test
    def coefficient_gradient_is_tangent_component(self) -> None:
        g = rng(6)
        f = random_lowrank(g, 7, 6, 2)
        grad_w = g.standard_normal((7, 6))
        _, _, grad_s = factor_gradients(f, grad_w)
        assert_matrix_close(f.u.T @ grad_w @ f.v, grad_s)


class BasisAugmentationTest(TestCase):
    @test
    def orthogonal_direction_fills_the_plane(self) -> None:
        q = basis_augmentation(E1, E2)
        assert_equal((2, 2), q.shape)
        assert_orthonormal(q)

    @test
    def parallel_dynamics_keeps_the_basis(self) -> None:
        q = basis_augmentation(E1, 2.0 * E1)
        assert_orthonormal(q)
        assert_almost_equal(1.0, abs(q[0, 0]), places=14)
        assert_in_span(q, E1)

    @test
    def zero_dynamics(self) -> None:
        b = random_orthonormal(rng(7), 6, 2)
        q = basis_augmentation(b, np.zeros((6, 2)))
        assert_orthonormal(q)
        assert_in_span(q, b)

    @test
    def spans_both_blocks(self) -> None:
        g = rng(8)
        b = random_orthonormal(g, 20, 4)
        dyn = g.standard_normal((20, 4))
        q = basis_augmentation(b, dyn)
        assert_equal((20, 8), q.shape)
        assert_in_span(q, b)
        assert_in_span(q, dyn, tol=1e-10 * frobenius_norm(dyn))

    @test
    def capped_at_dimension(self) -> None:
        g = rng(9)
        b = random_orthonormal(g, 5, 3)
        q = basis_augmentation(b, g.standard_normal((5, 3)))
        assert_equal((5, 5), q.shape)
        assert_orthonormal(q)

    @test
    def shapes_must_agree(self) -> None:
        with assert_raises(ShapeError):
            basis_augmentation(np.ones((4, 2)), np.ones((4, 3)))


class ProjectMomentTest(TestCase):
    @before
    def setup_factors(self) -> None:
        self.rng = rng(10)
        self.f = random_lowrank(self.rng, 8, 6, 2)

    @test
    def same_frame_is_unchanged(self) -> None:
        m = self.rng.standard_normal((2, 2))
        assert_matrix_close(m, project_moment(self.f.u, self.f, m, self.f.v))

    @test
    def augmented_frame_preserves_the_ambient_moment(self) -> None:
        m = self.rng.standard_normal((2, 2))
        u_hat = basis_augmentation(self.f.u, self.rng.standard_normal((8, 2)))
        v_hat = basis_augmentation(self.f.v, self.rng.standard_normal((6, 2)))
        projected = project_moment(u_hat, self.f, m, v_hat)
        assert_matrix_close(
            self.f.u @ m @ self.f.v.T,
            u_hat @ projected @ v_hat.T,
            rtol=1e-10,
        )

    @test
    def second_moment_stays_nonnegative(self) -> None:
        m = self.rng.random((2, 2))
        u_hat = random_orthonormal(self.rng, 8, 4)
        v_hat = random_orthonormal(self.rng, 6, 4)
        projected = project_second_moment(u_hat, self.f, m, v_hat)
        assert_equal((4, 4), projected.shape)
        assert_true(np.all(projected >= 0.0))

    @test
    def negative_second_moment(self) -> None:
        m = np.array([[1.0, -0.5], [0.0, 1.0]])
        with assert_raises(NumericError):
            project_second_moment(self.f.u, self.f, m, self.f.v)

    @test
    def moment_shape_is_checked(self) -> None:
        with assert_raises(ShapeError):
            project_moment(self.f.u, self.f, np.eye(3), self.f.v)


class CarrySecondMomentTest(TestCase):
    @test
    def rotation_does_not_cancel(self) -> None:
        rotation = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
        moment = np.ones((2, 2))
        first = np.array([[1.0, 1.0], [-1.0, -1.0]])
        carried = carry_second_moment(rotation, moment, identity(2))
        assert_matrix_close(np.ones((2, 2)), carried)
        rotated = rotation @ first
        assert_almost_equal(np.sqrt(2.0), rotated[1, 0], places=14)
        assert_true(np.all(np.abs(rotated) <= 2.0 * np.sqrt(carried)))

    @test
    def signed_permutation_reorders(self) -> None:
        swap = np.array([[0.0, -1.0], [1.0, 0.0]])
        moment = np.array([[1.0, 2.0], [3.0, 4.0]])
        carried = carry_second_moment(swap, moment, swap.T)
        assert_equal([[4.0, 3.0], [2.0, 1.0]], carried.tolist())

    @test
    def isometries_keep_the_total(self) -> None:
        g = rng(21)
        moment = g.random((3, 3))
        left = random_orthonormal(g, 5, 3)
        right = random_orthonormal(g, 4, 3).T
        carried = carry_second_moment(left, moment, right)
        assert_equal((5, 4), carried.shape)
        assert_almost_equal(np.sum(moment), np.sum(carried), places=12)

    @test
    def bounds_the_carried_first_moment(self) -> None:
        g = rng(22)
        for _ in range(20):
            moment = g.random((3, 3))
            signs = np.where(g.random((3, 3)) < 0.5, -1.0, 1.0)
            first = 0.7 * signs * np.sqrt(moment)
            left = random_orthonormal(g, 6, 3)
            right = random_orthonormal(g, 6, 3).T
            carried = carry_second_moment(left, moment, right)
            bound = 0.7 * 3.0 * np.sqrt(carried) + 1e-12
            assert_true(np.all(np.abs(left @ first @ right) <= bound))

    @test
    def negative_entries(self) -> None:
        with assert_raises(NumericError):
            carry_second_moment(
                identity(2),
                np.array([[1.0, -1e-300], [0.0, 0.0]]),
                identity(2),
            )


class TruncationPolicyTest(TestCase):
    @test
    def defaults(self) -> None:
        policy = TruncationPolicy()
        assert_equal(0.05, policy.tau)
        assert_equal(2, policy.r_min)
        assert_equal(None, policy.r_max)

    @test
    def invalid_values(self) -> None:
        with assert_raises(ValueError):
            TruncationPolicy(tau=-0.1)
        with assert_raises(ValueError):
            TruncationPolicy(r_min=0)
        with assert_raises(ValueError):
            TruncationPolicy(r_min=4, r_max=3)
        with assert_raises(ValueError):
            TruncationPolicy(fixed_rank=0)

    @test
    def bounds_are_capped_by_size(self) -> None:
        assert_equal((2, 6), TruncationPolicy().rank_bounds(6))
        assert_equal((1, 1), TruncationPolicy(r_min=2).rank_bounds(1))
        assert_equal((2, 3), TruncationPolicy(r_max=3).rank_bounds(6))


class TruncateTest(TestCase):
    @before
    def setup_bases(self) -> None:
        self.eye = identity(3)
        self.s_hat = np.diag([1.0, 0.1, 1e-8])

    def _rank(self, policy: TruncationPolicy) -> int:
        return truncate_naive(self.s_hat, self.eye, self.eye, policy).rank

    @test
    def tail_rule(self) -> None:
        policy = TruncationPolicy(tau=0.05, r_min=1)
        f, s_v = truncate_hb(
            self.s_hat, np.zeros((3, 3)), self.eye, self.eye, policy
        )
        assert_equal(2, f.rank)
        assert_equal([[0.0, 0.0], [0.0, 0.0]], s_v.tolist())
        assert_equal(2, self._rank(policy))

    @test
    def zero_tolerance_keeps_nonzero_values(self) -> None:
        policy = TruncationPolicy(tau=0.0, r_min=1)
        f = truncate_naive(self.s_hat, self.eye, self.eye, policy)
        assert_equal(3, f.rank)
        assert_matrix_close(self.s_hat, reconstruct(f), rtol=1e-10)

    @test
    def single_value(self) -> None:
        policy = TruncationPolicy(tau=0.5, r_min=1)
        f = truncate_naive(np.array([[5.0]]), E1, E1, policy)
        assert_equal(1, f.rank)
        assert_equal([[5.0]], f.s.tolist())

    @test
    def bounds_clamp_the_rank(self) -> None:
        high = TruncationPolicy(tau=0.05, r_min=3)
        assert_equal(3, self._rank(high))
        low = TruncationPolicy(tau=0.0, r_min=1, r_max=1)
        assert_equal(1, self._rank(low))

    @test
    def fixed_rank(self) -> None:
        policy = TruncationPolicy(tau=0.0, r_min=1, fixed_rank=1)
        assert_equal(1, self._rank(policy))

    @test
    def momentum_guard_raises_the_rank(self) -> None:
        s_hat = np.diag([1.0, 1e-3])
        sv_hat = np.array([[0.0, 0.0], [0.0, 1.0]])
        eye = identity(2)
        plain = TruncationPolicy(tau=0.05, r_min=1)
        guarded = TruncationPolicy(tau=0.05, r_min=1, guard_momentum=True)
        f, s_v = truncate_hb(s_hat, sv_hat, eye, eye, plain)
        assert_equal(1, f.rank)
        assert_equal([[0.0]], s_v.tolist())
        f, s_v = truncate_hb(s_hat, sv_hat, eye, eye, guarded)
        assert_equal(2, f.rank)
        assert_matrix_close(sv_hat, s_v)

    @test
    def naive_and_heavy_ball_agree(self) -> None:
        g = rng(12)
        s_hat = g.standard_normal((4, 4))
        u_hat = random_orthonormal(g, 9, 4)
        v_hat = random_orthonormal(g, 7, 4)
        policy = TruncationPolicy(tau=0.3, r_min=1)
        hb, _ = truncate_hb(s_hat, np.zeros((4, 4)), u_hat, v_hat, policy)
        naive = truncate_naive(s_hat, u_hat, v_hat, policy)
        assert_true(np.array_equal(hb.u, naive.u))
        assert_true(np.array_equal(hb.s, naive.s))
        assert_true(np.array_equal(hb.v, naive.v))

    @test
    def contract_and_orthonormality(self) -> None:
        g = rng(13)
        for tau in (0.0, 0.1, 0.3, 0.6):
            s_hat = g.standard_normal((6, 6))
            u_hat = random_orthonormal(g, 10, 6)
            v_hat = random_orthonormal(g, 8, 6)
            policy = TruncationPolicy(tau=tau, r_min=1)
            f = truncate_naive(s_hat, u_hat, v_hat, policy)
            error = frobenius_norm(u_hat @ s_hat @ v_hat.T - reconstruct(f))
            theta = tau * frobenius_norm(s_hat)
            assert_less_equal(error, theta + 1e-12)
            assert_orthonormal(f.u)
            assert_orthonormal(f.v)

    @test
    def rectangular_coefficient(self) -> None:
        g = rng(14)
        u_hat = random_orthonormal(g, 3, 3)
        v_hat = random_orthonormal(g, 8, 4)
        policy = TruncationPolicy(tau=0.0, r_min=1)
        f = truncate_naive(g.standard_normal((3, 4)), u_hat, v_hat, policy)
        assert_equal(3, f.rank)
        assert_equal((3, 8), f.shape)

    @test
    def coefficient_shape_is_checked(self) -> None:
        with assert_raises(ShapeError):
            truncate_naive(
                np.eye(2), self.eye, self.eye, TruncationPolicy(r_min=1)
            )


class TruncateAdamTest(TestCase):
    @before
    def setup_moments(self) -> None:
        self.eye = identity(3)
        self.s_hat = np.diag([3.0, 2.0, 1.0])
        self.policy = TruncationPolicy(tau=0.0, r_min=1)

    @test
    def zero_second_moment(self) -> None:
        _, _, s_k = truncate_adam(
            self.s_hat,
            np.zeros((3, 3)),
            np.zeros((3, 3)),
            self.eye,
            self.eye,
            self.policy,
        )
        assert_equal(np.zeros((3, 3)).tolist(), s_k.tolist())

    @test
    def untruncated_moments_are_kept(self) -> None:
        g = rng(15)
        sv_hat = g.standard_normal((3, 3))
        sk_hat = g.random((3, 3))
        f, s_v, s_k = truncate_adam(
            self.s_hat, sv_hat, sk_hat, self.eye, self.eye, self.policy
        )
        assert_equal(3, f.rank)
        assert_matrix_close(sv_hat, s_v)
        assert_matrix_close(sk_hat, s_k)

    @test
    def second_moment_is_nonnegative(self) -> None:
        g = rng(16)
        for _ in range(5):
            s_hat = g.standard_normal((4, 4))
            u_hat = random_orthonormal(g, 6, 4)
            v_hat = random_orthonormal(g, 5, 4)
            _, s_v, s_k = truncate_adam(
                s_hat,
                g.standard_normal((4, 4)),
                g.random((4, 4)),
                u_hat,
                v_hat,
                TruncationPolicy(tau=0.2, r_min=1),
            )
            assert_equal(s_v.shape, s_k.shape)
            assert_true(np.all(s_k >= 0.0))

    @test
    def negative_second_moment(self) -> None:
        sk_hat = -np.ones((3, 3))
        with assert_raises(NumericError):
            truncate_adam(
                self.s_hat,
                np.zeros((3, 3)),
                sk_hat,
                self.eye,
                self.eye,
                self.policy,
            )


@pytest.mark.parametrize(
    "sigma,tau,expected",
    [
        ([1.0, 0.1, 1e-8], 0.05, 2),
        ([1.0, 0.1, 1e-8], 0.2, 1),
        ([1.0, 1.0, 1.0, 1.0], 0.45, 4),
        ([1.0, 1.0, 1.0, 1.0], 0.55, 3),
        ([4.0, 3.0], 0.0, 2),
    ],
)
def test_truncation_rank(
    sigma: list[float], tau: float, expected: int
) -> None:
    n = len(sigma)
    eye = identity(n)
    policy = TruncationPolicy(tau=tau, r_min=1)
    assert truncate_naive(np.diag(sigma), eye, eye, policy).rank == expected
