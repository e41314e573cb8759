from pathlib import Path

from asserts import assert_equal, assert_is_instance
from dectest import TestCase, test

from lrmomentum.exceptions import (
    CheckpointError,
    ConfigError,
    IntegrityError,
    LowRankError,
    NumericError,
    StiffnessError,
    VerificationError,
)


class ConfigErrorTest(TestCase):
    @test
    def message_lists_fields(self) -> None:
        error = ConfigError({"tau": "must be >= 0", "lr": "must be > 0"})
        assert_equal(
            "invalid configuration (lr: must be > 0; tau: must be >= 0)",
            str(error),
        )
        assert_is_instance(error, ValueError)


class StiffnessErrorTest(TestCase):
    @test
    def is_a_numeric_error(self) -> None:
        error = StiffnessError(2e13)
        assert_is_instance(error, NumericError)
        assert_equal(2e13, error.condition)
        assert_equal(
            "momentum coefficient too ill-conditioned (cond = 2e+13)",
            str(error),
        )


class CheckpointErrorTest(TestCase):
    @test
    def message_names_the_path(self) -> None:
        error = IntegrityError(Path("ckpt"), "truncated")
        assert_is_instance(error, CheckpointError)
        assert_is_instance(error, LowRankError)
        assert_equal(Path("ckpt"), error.path)
        assert_equal("ckpt: truncated", str(error))


class VerificationErrorTest(TestCase):
    @test
    def message(self) -> None:
        error = VerificationError({"scaling": "x", "energy": "y"})
        assert_equal({"scaling": "x", "energy": "y"}, error.failures)
        assert_equal("2 check(s) failed: energy, scaling", str(error))
