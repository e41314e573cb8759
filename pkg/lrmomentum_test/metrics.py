from __future__ import annotations

from pathlib import Path

import pytest
from asserts import assert_equal, assert_raises
from dectest import TestCase, test

from lrmomentum.metrics import (
    METRICS_COLUMNS,
    WALL_TIME_COLUMN,
    MetricsRow,
    MetricsWriter,
    compression_ratio,
    low_rank_parameter_count,
    metrics_columns,
    read_metrics,
    write_table,
)


def _row(**kwargs: object) -> MetricsRow:
    values: dict[str, object] = {
        "step": 3,
        "loss": 0.1,
        "val_metric": 0.25,
        "ranks": (5, 3),
        "total_params": 1025,
        "compression_ratio": 89.75,
    }
    values.update(kwargs)
    return MetricsRow(**values)  # type: ignore


class MetricsRowTest(TestCase):
    @test
    def as_dict(self) -> None:
        assert_equal(
            {
                "step": "3",
                "loss": "0.1",
                "val_metric": "0.25",
                "ranks": "5;3",
                "total_params": "1025",
                "compression_ratio": "89.75",
            },
            _row().as_dict(),
        )

    @test
    def floats_round_trip(self) -> None:
        loss = 1.0 / 3.0
        assert_equal(loss, float(_row(loss=loss).as_dict()["loss"]))

    @test
    def wall_time(self) -> None:
        row = _row(wall_ms=1.23456)
        assert_equal("1.235", row.as_dict(with_wall_time=True)["wall_ms"])
        assert_equal("0.000", _row().as_dict(with_wall_time=True)["wall_ms"])
        assert_equal(METRICS_COLUMNS, list(row.as_dict()))

    @test
    def ranks_must_be_positive(self) -> None:
        with assert_raises(ValueError):
            _row(ranks=(2, 0))

    @test
    def ratio_must_be_below_100(self) -> None:
        with assert_raises(ValueError):
            _row(compression_ratio=100.0)
        _row(compression_ratio=-20.0)


class MetricsWriterTest(TestCase):
    @test
    def write_before_open(self) -> None:
        writer = MetricsWriter(Path("unused.csv"))
        with assert_raises(RuntimeError):
            writer.write(_row())


def test_header_only(tmp_path: Path) -> None:
    path = tmp_path / "sub" / "metrics.csv"
    with MetricsWriter(path):
        pass
    assert path.read_text(encoding="utf-8") == (
        "step,loss,val_metric,ranks,total_params,compression_ratio\n"
    )
    assert read_metrics(path) == []


def test_rows_are_readable(tmp_path: Path) -> None:
    path = tmp_path / "metrics.csv"
    with MetricsWriter(path, with_wall_time=True) as writer:
        writer.write(_row(step=0, wall_ms=2.0))
        writer.write(_row(step=1, loss=0.05))
    rows = read_metrics(path)
    assert [r["step"] for r in rows] == ["0", "1"]
    assert rows[1]["loss"] == "0.05"
    assert rows[0][WALL_TIME_COLUMN] == "2.000"
    assert list(rows[0]) == metrics_columns(with_wall_time=True)


def test_write_table(tmp_path: Path) -> None:
    path = tmp_path / "table.csv"
    write_table(path, ["a", "b"], [{"a": 1, "b": "x"}, {"a": 2, "b": "y"}])
    assert path.read_text(encoding="utf-8") == "a,b\n1,x\n2,y\n"


@pytest.mark.parametrize(
    "n_out,n_in,rank,expected",
    [(100, 100, 5, 1025), (10, 4, 1, 15), (3, 3, 3, 27)],
)
def test_low_rank_parameter_count(
    n_out: int, n_in: int, rank: int, expected: int
) -> None:
    assert low_rank_parameter_count(n_out, n_in, rank) == expected


@pytest.mark.parametrize(
    "lr_params,baseline,expected",
    [(1025, 10000, 89.75), (10000, 10000, 0.0), (15000, 10000, -50.0)],
)
def test_compression_ratio(
    lr_params: int, baseline: int, expected: float
) -> None:
    assert compression_ratio(lr_params, baseline) == expected


def test_compression_ratio_needs_a_baseline() -> None:
    with pytest.raises(ValueError):
        compression_ratio(10, 0)
