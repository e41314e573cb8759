from __future__ import annotations

from enum import IntEnum

from lrmomentum.exceptions import (
    ConfigError,
    NumericError,
    VerificationError,
)


class ExitCode(IntEnum):
    SUCCESS = 0
    FAILURE = 1
    CONFIG_ERROR = 2
    NUMERIC_FAILURE = 3
    VERIFICATION_FAILURE = 4


def exit_code_for(exc: BaseException) -> ExitCode:
    if isinstance(exc, ConfigError):
        return ExitCode.CONFIG_ERROR
    elif isinstance(exc, NumericError):
        return ExitCode.NUMERIC_FAILURE
    elif isinstance(exc, VerificationError):
        return ExitCode.VERIFICATION_FAILURE
    else:
        return ExitCode.FAILURE
