from __future__ import annotations

import pytest
from asserts import (
    assert_equal,
    assert_less,
    assert_less_equal,
    assert_true,
    fail,
)
from dectest import TestCase, before, test

from lrmomentum.exceptions import VerificationError
from lrmomentum.report import CheckReport
from lrmomentum.verify import (
    CHECKS,
    RANK_ADAPTATION_RUN,
    adam_moment_check,
    compression_check,
    full_rank_equivalence,
    gradient_check,
    naive_ordering_check,
    rank_adaptation_check,
    run_verification,
)
from lrmomentum_test.testutil import disable_logger


class ChecksTest(TestCase):
    @before
    def setup_logger(self) -> None:
        disable_logger()

    @test
    def full_rank_trajectories_match(self) -> None:
        report = full_rank_equivalence(sizes=(4, 6), steps=10)
        assert_true(report.passed, report.message)
        assert_less_equal(report.values["max_relative_error"], 1e-10)

    @test
    def gradients_match_finite_differences(self) -> None:
        report = gradient_check()
        assert_true(report.passed, report.message)
        assert_equal({"dense", "low_rank", "factors"}, set(report.values))

    @test
    def second_moments_stay_nonnegative(self) -> None:
        report = adam_moment_check(steps=10)
        assert_true(report.passed, report.message)
        assert_less_equal(0.0, report.values["min_second_moment"])

    @test
    def rank_of_a_small_target_is_recovered(self) -> None:
        run = {
            **RANK_ADAPTATION_RUN,
            "n": 16,
            "true_rank": 3,
            "init_rank": 8,
            "max_steps": 400,
        }
        report = rank_adaptation_check(run=run, max_loss=1e-4)
        assert_true(report.passed, report.message)
        assert_equal(3.0, report.values["rank"])

    @test
    def projected_moments_train_better_than_stale_ones(self) -> None:
        report = naive_ordering_check(seeds=3)
        assert_true(report.passed, report.message)
        assert_less(
            report.values["median_loss"], report.values["median_naive_loss"]
        )

    @test
    def parameter_totals(self) -> None:
        report = compression_check()
        assert_true(report.passed, report.message)
        assert_equal(89.75, report.values["ratio"])


class RunVerificationTest(TestCase):
    @before
    def setup_logger(self) -> None:
        disable_logger()

    @test
    def selected_checks(self) -> None:
        reports = run_verification(["counterexample", "identity"])
        assert_equal(
            ["counterexample", "factored-identity"], [r.name for r in reports]
        )
        assert_true(all(r.passed for r in reports))

    @test
    def unknown_check(self) -> None:
        try:
            run_verification(["counterexample", "nonsense"])
        except ValueError as exc:
            assert_equal("unknown checks: nonsense", str(exc))
        else:
            fail("ValueError not raised")


def test_failures_are_collected(monkeypatch: pytest.MonkeyPatch) -> None:
    disable_logger()
    monkeypatch.setitem(
        CHECKS,
        "always-fails",
        lambda seed: [
            CheckReport("first", False, "broken"),
            CheckReport("second", True),
            CheckReport("third", False, "also broken"),
        ],
    )
    with pytest.raises(VerificationError) as excinfo:
        run_verification(["always-fails"])
    assert excinfo.value.failures == {
        "first": "broken",
        "third": "also broken",
    }
