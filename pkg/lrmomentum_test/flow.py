from __future__ import annotations

import numpy as np
from asserts import (
    assert_almost_equal,
    assert_equal,
    assert_false,
    assert_greater,
    assert_less,
    assert_less_equal,
    assert_raises,
    assert_true,
    fail,
)
from dectest import TestCase, before, test

from lrmomentum.data import gen_matrix_recovery
from lrmomentum.exceptions import NumericError, StiffnessError
from lrmomentum.flow import (
    STIFFNESS_THRESHOLD,
    EnergyRecord,
    FactoredState,
    ProjectedState,
    VanillaState,
    check_factored_identity,
    counterexample_check,
    counterexample_point,
    energy_record,
    energy_study,
    error_scaling_study,
    factored_momentum_rate,
    flow_vs_discrete,
    integrate,
    naive_flow_rates,
    projected_residual,
    random_factored_state,
    start_projected,
    step_factored_momentum_flow,
    step_projected_flow,
    step_vanilla_flow,
    verify_energy_dissipation,
)
from lrmomentum.linalg import condition_number, frobenius_norm
from lrmomentum.lowrank import factorize, reconstruct, tangent_project
from lrmomentum.net import MatrixRecovery
from lrmomentum_test.testutil import assert_matrix_close, rng


def _vanilla_energy(s: VanillaState, loss: MatrixRecovery) -> float:
    kinetic = sum(float(np.sum(m**2)) for m in (s.u_v, s.s_v, s.v_v))
    return loss.value(s.weight()) + 0.5 * kinetic


def _vanilla_distance(a: VanillaState, b: VanillaState) -> float:
    pairs = (
        (a.u, b.u),
        (a.s, b.s),
        (a.v, b.v),
        (a.u_v, b.u_v),
        (a.s_v, b.s_v),
        (a.v_v, b.v_v),
    )
    return float(np.sqrt(sum(np.sum((x - y) ** 2) for x, y in pairs)))


def _vanilla_start(seed: int, gamma: float) -> VanillaState:
    g = rng(seed)
    f = factorize(g.standard_normal((5, 4)) / 2.0, 2)
    return VanillaState(
        f.u,
        f.s,
        f.v,
        0.1 * g.standard_normal(f.u.shape),
        0.1 * g.standard_normal(f.s.shape),
        0.1 * g.standard_normal(f.v.shape),
        gamma=gamma,
    )


class CounterexampleTest(TestCase):
    @test
    def naive_flow_is_stationary(self) -> None:
        f, mom, grad = counterexample_point()
        loss = MatrixRecovery(reconstruct(f) - grad)
        state = VanillaState(f.u, f.s, f.v, mom.u, mom.s, mom.v, gamma=0.1)
        w_dot, mom_dot = naive_flow_rates(state, loss)
        assert_equal(0.0, float(np.max(np.abs(w_dot))))
        assert_equal(0.0, float(np.max(np.abs(mom_dot))))
        assert_almost_equal(
            1.0, frobenius_norm(tangent_project(f, grad)), places=12
        )

    @test
    def check_passes(self) -> None:
        report = counterexample_check()
        assert_true(report.passed, report.message)
        assert_less(report.values["loss_after"], report.values["loss_before"])


class VanillaFlowTest(TestCase):
    @test
    def energy_decreases(self) -> None:
        g = rng(1)
        loss = MatrixRecovery(g.standard_normal((6, 5)))
        f = factorize(g.standard_normal((6, 5)), 2)
        state = VanillaState(
            f.u,
            f.s,
            f.v,
            np.zeros_like(f.u),
            np.zeros_like(f.s),
            np.zeros_like(f.v),
            gamma=0.5,
        )
        before = _vanilla_energy(state, loss)
        for _ in range(100):
            state = step_vanilla_flow(state, loss, 0.01)
        assert_almost_equal(1.0, state.t, places=12)
        assert_less(_vanilla_energy(state, loss), before)

    @test
    def halving_the_step_divides_the_error_by_sixteen(self) -> None:
        loss = MatrixRecovery(rng(2).standard_normal((5, 4)) / 2.0)
        start = _vanilla_start(3, gamma=0.5)
        reference, _ = integrate(step_vanilla_flow, start, loss, 0.003125, 1.0)
        errors: list[float] = []
        for h in (0.05, 0.025):
            final, _ = integrate(step_vanilla_flow, start, loss, h, 1.0)
            errors.append(_vanilla_distance(final, reference))
        assert_greater(errors[1], 0.0)
        ratio = errors[0] / errors[1]
        assert_greater(ratio, 12.0)
        assert_less(ratio, 20.0)

    @test
    def energy_is_conserved_without_damping(self) -> None:
        loss = MatrixRecovery(rng(2).standard_normal((5, 4)) / 2.0)
        state = _vanilla_start(3, gamma=0.0)
        before = _vanilla_energy(state, loss)
        state, _ = integrate(step_vanilla_flow, state, loss, 0.01, 2.0)
        drift = abs(_vanilla_energy(state, loss) - before)
        assert_less_equal(drift, 1e-6 * before)

    @test
    def step_must_be_positive(self) -> None:
        f, mom, grad = counterexample_point()
        state = VanillaState(f.u, f.s, f.v, mom.u, mom.s, mom.v, gamma=0.1)
        with assert_raises(ValueError):
            step_vanilla_flow(state, MatrixRecovery(grad), 0.0)


class ProjectedFlowTest(TestCase):
    @before
    def setup_loss(self) -> None:
        self.loss = gen_matrix_recovery(8, 2, seed=3)

    @test
    def start_is_near_the_optimum(self) -> None:
        state = start_projected(self.loss, 2, 0.5, perturbation=0.05)
        assert_equal(2, int(np.linalg.matrix_rank(state.w, tol=1e-10)))
        distance = frobenius_norm(state.w - self.loss.target)
        assert_less(distance, 0.06)
        assert_greater(distance, 0.0)

    @test
    def dissipates_energy_near_the_optimum(self) -> None:
        state = start_projected(self.loss, 2, 0.5)
        _, trace = integrate(
            step_projected_flow, state, self.loss, 0.01, 5.0, energy_record
        )
        assert_equal(501, len(trace))
        report = verify_energy_dissipation(trace, 0.5)
        assert_true(report.passed, report.message)
        assert_less(trace[-1].residual, trace[0].residual)

    @test
    def energy_is_conserved_without_damping(self) -> None:
        state = start_projected(self.loss, 2, 0.0)
        f = factorize(state.w, 2)
        mom = tangent_project(f, rng(6).standard_normal(state.w.shape))
        state = ProjectedState(state.w, 0.05 * mom, 2, 0.0)
        _, trace = integrate(
            step_projected_flow, state, self.loss, 0.01, 2.0, energy_record
        )
        energies = [r.energy for r in trace]
        drift = max(abs(e - energies[0]) for e in energies)
        assert_less_equal(drift, 1e-5 * energies[0])

    @test
    def stationary_at_the_long_horizon(self) -> None:
        trace, reports = energy_study(horizon=50.0)
        assert_almost_equal(50.0, trace[-1].t, places=9)
        assert_true(reports[1].passed, reports[1].message)
        assert_less_equal(trace[-1].residual, 1e-6)

    @test
    def full_rank_is_plain_heavy_ball(self) -> None:
        g = rng(4)
        loss = MatrixRecovery(g.standard_normal((3, 3)))
        w0 = g.standard_normal((3, 3))
        state = ProjectedState(w0, np.zeros((3, 3)), 3, 0.5, full_rank=True)
        assert_almost_equal(
            frobenius_norm(w0 - loss.target),
            projected_residual(state, loss),
            places=12,
        )
        state, trace = integrate(
            step_projected_flow, state, loss, 0.01, 1.0, energy_record
        )
        assert_less(trace[-1].energy, trace[0].energy)

    @test
    def non_finite_state(self) -> None:
        w = np.full((2, 2), np.nan)
        state = ProjectedState(w, np.zeros((2, 2)), 2, 0.5, full_rank=True)
        with assert_raises(NumericError):
            step_projected_flow(state, MatrixRecovery(np.zeros((2, 2))), 0.1)


class FactoredFlowTest(TestCase):
    @before
    def setup_state(self) -> None:
        self.rng = rng(5)
        self.state = random_factored_state(self.rng, 6, 2, gamma=0.5)
        self.loss = MatrixRecovery(self.rng.standard_normal((6, 6)))

    @test
    def random_state_is_well_conditioned(self) -> None:
        assert_less_equal(condition_number(self.state.s_v), 4.0 + 1e-12)

    @test
    def product_rule(self) -> None:
        report = check_factored_identity(samples=10)
        assert_true(report.passed, report.message)
        assert_less_equal(report.values["max_relative_error"], 1e-8)

    @test
    def stiff_coefficient_is_rejected(self) -> None:
        e = np.eye(6)
        state = FactoredState(
            w=np.zeros((6, 6)),
            u_v=e[:, :2],
            s_v=np.diag([1.0, 1e-13]),
            v_v=e[:, :2],
            gamma=0.5,
        )
        try:
            factored_momentum_rate(state, self.loss)
        except StiffnessError as exc:
            assert_greater(exc.condition, STIFFNESS_THRESHOLD)
        else:
            fail("StiffnessError not raised")

    @test
    def threshold_can_be_raised(self) -> None:
        e = np.eye(6)
        state = FactoredState(
            w=np.zeros((6, 6)),
            u_v=e[:, :2],
            s_v=np.diag([1.0, 1e-13]),
            v_v=e[:, :2],
            gamma=0.5,
        )
        u_dot, _, _ = factored_momentum_rate(
            state, self.loss, max_condition=1e14
        )
        assert_equal((6, 2), u_dot.shape)

    @test
    def step_tracks_the_condition_number(self) -> None:
        state = step_factored_momentum_flow(self.state, self.loss, 1e-3)
        assert_almost_equal(1e-3, state.t, places=15)
        assert_almost_equal(
            condition_number(state.s_v), state.condition, places=10
        )
        assert_equal(self.state.rank, state.rank)


class IntegrateTest(TestCase):
    @test
    def records_every_step(self) -> None:
        loss = MatrixRecovery(np.eye(2))
        state = ProjectedState(
            np.zeros((2, 2)), np.zeros((2, 2)), 2, 0.5, full_rank=True
        )
        final, trace = integrate(
            step_projected_flow, state, loss, 0.25, 1.0, energy_record
        )
        assert_equal([0.0, 0.25, 0.5, 0.75, 1.0], [r.t for r in trace])
        assert_almost_equal(1.0, final.t, places=14)

    @test
    def no_trace_without_recorder(self) -> None:
        loss = MatrixRecovery(np.eye(2))
        state = ProjectedState(
            np.zeros((2, 2)), np.zeros((2, 2)), 2, 0.5, full_rank=True
        )
        _, trace = integrate(step_projected_flow, state, loss, 0.5, 1.0)
        assert_equal([], trace)

    @test
    def horizon_must_be_a_multiple(self) -> None:
        loss = MatrixRecovery(np.eye(2))
        state = ProjectedState(np.zeros((2, 2)), np.zeros((2, 2)), 2, 0.5)
        with assert_raises(ValueError):
            integrate(step_projected_flow, state, loss, 0.3, 1.0)
        with assert_raises(ValueError):
            integrate(step_projected_flow, state, loss, 0.0, 1.0)


class EnergyDissipationTest(TestCase):
    def _trace(self, energies: list[float]) -> list[EnergyRecord]:
        return [
            EnergyRecord(t=0.1 * i, energy=e, momentum_sq=1.0, residual=0.0)
            for i, e in enumerate(energies)
        ]

    @test
    def exact_dissipation(self) -> None:
        energies = [1.0 - 0.5 * 0.1 * i for i in range(11)]
        report = verify_energy_dissipation(self._trace(energies), 0.5)
        assert_true(report.passed, report.message)
        assert_less_equal(report.values["relative_error"], 1e-12)

    @test
    def increase_is_reported(self) -> None:
        report = verify_energy_dissipation(
            self._trace([1.0, 0.9, 0.95, 0.8]), 0.5
        )
        assert_false(report.passed)
        assert_equal(2.0, report.values["first_violation"])

    @test
    def wrong_rate_is_reported(self) -> None:
        energies = [1.0 - 0.1 * i for i in range(11)]
        report = verify_energy_dissipation(self._trace(energies), 0.5)
        assert_false(report.passed)

    @test
    def short_trace_passes(self) -> None:
        assert_true(verify_energy_dissipation(self._trace([1.0]), 0.5).passed)


class ScalingTest(TestCase):
    @test
    def error_shrinks_with_the_learning_rate(self) -> None:
        study = error_scaling_study(lrs=(0.1, 0.05))
        assert_equal(1, len(study.ratios))
        assert_greater(study.ratios[0], 1.33)
        assert_less(study.ratios[0], 3.0)
        assert_equal(2, len(study.constants))

    @test
    def run_started_at_the_target_never_leaves_it(self) -> None:
        loss = gen_matrix_recovery(6, 2, seed=1)
        error = flow_vs_discrete(loss, 0.1, 1.0, factorize(loss.target, 2))
        assert_less_equal(error, 1e-12)

    @test
    def error_vanishes_as_the_rate_goes_to_zero(self) -> None:
        study = error_scaling_study(lrs=(0.1, 0.05, 0.025))
        pairs = zip(study.errors, study.errors[1:])
        assert_true(all(a > b for a, b in pairs))
        assert_less(study.errors[-1], study.errors[0] / 2.66)
        spread = max(study.constants) / min(study.constants)
        assert_less(spread, 3.0)

    @test
    def horizon_must_be_a_multiple_of_the_rate(self) -> None:
        loss = gen_matrix_recovery(4, 1)
        with assert_raises(ValueError):
            flow_vs_discrete(loss, 0.3, 1.0, factorize(loss.target, 1))


def test_energy_study_reports_both_checks() -> None:
    trace, reports = energy_study(n=8, horizon=1.0)
    assert [r.name for r in reports] == ["energy-dissipation", "stationarity"]
    assert reports[0].passed
    assert len(trace) == 101


def test_counterexample_state_is_rank_one() -> None:
    f, mom, _ = counterexample_point()
    assert_matrix_close(np.array([[1.0, 0.0], [0.0, 0.0]]), reconstruct(f))
    assert mom.rank == 1
