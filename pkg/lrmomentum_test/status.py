from pathlib import Path

from asserts import assert_equal
from dectest import TestCase, test

from lrmomentum.exceptions import (
    ConfigError,
    FormatError,
    NumericError,
    StiffnessError,
    VerificationError,
)
from lrmomentum.status import ExitCode, exit_code_for


class ExitCodeTest(TestCase):
    @test
    def config_error(self) -> None:
        assert_equal(
            ExitCode.CONFIG_ERROR, exit_code_for(ConfigError({"lr": "bad"}))
        )

    @test
    def numeric_errors(self) -> None:
        assert_equal(
            ExitCode.NUMERIC_FAILURE, exit_code_for(NumericError("nan"))
        )
        assert_equal(
            ExitCode.NUMERIC_FAILURE, exit_code_for(StiffnessError(1e15))
        )

    @test
    def verification_error(self) -> None:
        assert_equal(
            ExitCode.VERIFICATION_FAILURE,
            exit_code_for(VerificationError({"energy": "increase"})),
        )

    @test
    def everything_else(self) -> None:
        assert_equal(ExitCode.FAILURE, exit_code_for(OSError("disk full")))
        assert_equal(
            ExitCode.FAILURE, exit_code_for(FormatError(Path("x"), "bad"))
        )
        assert_equal(1, int(ExitCode.FAILURE))
