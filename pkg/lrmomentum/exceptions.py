from __future__ import annotations

from pathlib import Path

from lrmomentum.types import BadFieldsDict


class LowRankError(Exception):
    """Base class of all errors raised by lrmomentum."""


class ShapeError(LowRankError, ValueError):
    """Matrix dimensions do not fit together."""


class NumericError(LowRankError, ArithmeticError):
    """A computation produced or received non-finite or invalid values."""


class StiffnessError(NumericError):
    """The momentum coefficient is too ill-conditioned to invert.

    >>> error = StiffnessError(3.2e14)
    >>> error.condition
    320000000000000.0
    """

    def __init__(self, condition: float) -> None:
        super().__init__(
            "momentum coefficient too ill-conditioned "
            "(cond = {:.3g})".format(condition)
        )
        self.condition = condition


class ConfigError(LowRankError, ValueError):
    """One or more experiment configuration fields were invalid.

    Requires a dictionary as argument, where keys are the field names that
    have errors, and the values are messages describing the problem.

    >>> error = ConfigError({
    ...     "lr": "must be > 0, got -1.0",
    ...     "optimizer": "unknown value 'sgd'",
    ... })
    >>> len(error.fields)
    2

    """

    def __init__(self, fields: BadFieldsDict) -> None:
        self.fields = dict(fields)
        details = "; ".join(
            "{}: {}".format(name, message)
            for name, message in sorted(self.fields.items())
        )
        super().__init__("invalid configuration ({})".format(details))


class CheckpointError(LowRankError):
    def __init__(self, path: Path, message: str) -> None:
        super().__init__("{}: {}".format(path, message))
        self.path = path


class FormatError(CheckpointError):
    """A checkpoint manifest does not match the expected schema."""


class IntegrityError(CheckpointError):
    """A checkpoint is damaged or violates the factor invariants."""


class VerificationError(LowRankError):
    """One or more property checks failed.

    The failures dictionary maps check names to diagnostic messages.
    """

    def __init__(self, failures: BadFieldsDict) -> None:
        self.failures = dict(failures)
        super().__init__(
            "{} check(s) failed: {}".format(
                len(self.failures), ", ".join(sorted(self.failures))
            )
        )
