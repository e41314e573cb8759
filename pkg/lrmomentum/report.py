from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one property check.

    values holds the measured quantities the check is based on.

    >>> report = CheckReport("identity", True, "ok", {"max_error": 1e-14})
    >>> report.status
    'PASS'
    """

    name: str
    passed: bool
    message: str = ""
    values: dict[str, float] = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def summary(self) -> str:
        values = ", ".join(
            "{}={:.3g}".format(key, value)
            for key, value in sorted(self.values.items())
        )
        line = "{} {}".format(self.status, self.name)
        if self.message:
            line += ": " + self.message
        if values:
            line += " ({})".format(values)
        return line


def failures(reports: Iterable[CheckReport]) -> dict[str, str]:
    return {r.name: r.message for r in reports if not r.passed}
