from asserts import assert_equal
from dectest import TestCase, test

from lrmomentum.report import CheckReport, failures


class CheckReportTest(TestCase):
    @test
    def passing_summary(self) -> None:
        report = CheckReport("identity", True, values={"max_error": 1e-14})
        assert_equal("PASS identity (max_error=1e-14)", report.summary())

    @test
    def failing_summary(self) -> None:
        report = CheckReport(
            "energy", False, "energy increased", {"b": 2.0, "a": 0.5}
        )
        assert_equal(
            "FAIL energy: energy increased (a=0.5, b=2)", report.summary()
        )

    @test
    def collects_failed_checks(self) -> None:
        reports = [
            CheckReport("a", True),
            CheckReport("b", False, "wrong"),
        ]
        assert_equal({"b": "wrong"}, failures(reports))
