from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from types import TracebackType
from typing import IO, Any

METRICS_COLUMNS = [
    "step",
    "loss",
    "val_metric",
    "ranks",
    "total_params",
    "compression_ratio",
]
WALL_TIME_COLUMN = "wall_ms"


def low_rank_parameter_count(n_out: int, n_in: int, rank: int) -> int:
    """Floats stored by U, S and V of one low-rank layer.

    >>> low_rank_parameter_count(100, 100, 5)
    1025
    """

    return (n_out + n_in) * rank + rank * rank


def compression_ratio(lr_params: int, baseline_params: int) -> float:
    """Percentage of parameters saved against the dense baseline.

    Negative when the low-rank model is larger than the baseline.

    >>> compression_ratio(1025, 10000)
    89.75
    """

    if baseline_params <= 0:
        raise ValueError("baseline parameter count must be positive")
    return (baseline_params - lr_params) * 100.0 / baseline_params


@dataclass(frozen=True)
class MetricsRow:
    step: int
    loss: float
    val_metric: float
    ranks: tuple[int, ...]
    total_params: int
    compression_ratio: float
    wall_ms: float | None = None

    def __post_init__(self) -> None:
        if any(r < 1 for r in self.ranks):
            raise ValueError("ranks must be positive")
        if not self.compression_ratio < 100.0:
            raise ValueError("compression ratio must be below 100")

    def as_dict(self, with_wall_time: bool = False) -> dict[str, str]:
        row = {
            "step": str(self.step),
            "loss": repr(self.loss),
            "val_metric": repr(self.val_metric),
            "ranks": ";".join(str(r) for r in self.ranks),
            "total_params": str(self.total_params),
            "compression_ratio": repr(self.compression_ratio),
        }
        if with_wall_time:
            wall = 0.0 if self.wall_ms is None else self.wall_ms
            row[WALL_TIME_COLUMN] = "{:.3f}".format(wall)
        return row


def metrics_columns(with_wall_time: bool = False) -> list[str]:
    if with_wall_time:
        return METRICS_COLUMNS + [WALL_TIME_COLUMN]
    return list(METRICS_COLUMNS)


class MetricsWriter:
    """Single-writer CSV sink, flushed after every row.

    The header is written on open, so a run without steps still leaves a
    valid file.
    """

    def __init__(self, path: Path, with_wall_time: bool = False) -> None:
        self.path = path
        self.with_wall_time = with_wall_time
        self._file: IO[str] | None = None
        self._writer: csv.DictWriter[str] | None = None

    def __enter__(self) -> MetricsWriter:
        self.open()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_value: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        self.close()

    def open(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(
            self._file,
            fieldnames=metrics_columns(self.with_wall_time),
            lineterminator="\n",
        )
        self._writer.writeheader()
        self._file.flush()

    def write(self, row: MetricsRow) -> None:
        if self._writer is None or self._file is None:
            raise RuntimeError("metrics writer is not open")
        self._writer.writerow(row.as_dict(self.with_wall_time))
        self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
        self._file = None
        self._writer = None


def read_metrics(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_table(
    path: Path, columns: Sequence[str], rows: Sequence[dict[str, Any]]
) -> None:
    """Write rows with the given columns as CSV."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=list(columns), lineterminator="\n"
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
