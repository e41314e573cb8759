from __future__ import annotations

import json
import os
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from lrmomentum.exceptions import ConfigError
from lrmomentum.lowrank import TruncationPolicy

TASKS = ("matrix-recovery", "two-class", "custom-checkpoint")
OPTIMIZERS = (
    "hb",
    "adam",
    "lr-hb",
    "lr-hb-naive",
    "lr-adam",
    "lr-adam-naive",
    "lora-adam",
    "lora-hb",
)
ACTIVATIONS = ("identity", "relu", "tanh")
LR_SCHEDULES = ("constant", "linear")

THREADS_ENV = "DLRT_THREADS"


class Multiplicity(Enum):
    ANY = "0+"
    REQUIRED = "1"
    OPTIONAL = "0-1"


FieldValueParser = Callable[[Any], Any]
FieldTemplate = Tuple[str, FieldValueParser, Multiplicity]
FieldDict = Dict[str, Any]


class _FieldError(Exception):
    pass


def _as_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("expected an integer, got {!r}".format(value))
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value.strip())
        except ValueError:
            pass
    raise ValueError("expected an integer, got {!r}".format(value))


def _as_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError("expected a number, got {!r}".format(value))
    if isinstance(value, (int, float)):
        number = float(value)
    elif isinstance(value, str):
        try:
            number = float(value.strip())
        except ValueError:
            raise ValueError(
                "expected a number, got {!r}".format(value)
            ) from None
    else:
        raise ValueError("expected a number, got {!r}".format(value))
    if number != number or number in (float("inf"), float("-inf")):
        raise ValueError("must be finite, got {}".format(number))
    return number


def choice(*values: str) -> FieldValueParser:
    """Accept one of the given strings.

    >>> choice("a", "b")("b")
    'b'
    """

    def parse(value: Any) -> str:
        if not isinstance(value, str) or value not in values:
            raise ValueError("unknown value {!r}".format(value))
        return value

    return parse


def bounded_float(
    low: float | None = None,
    high: float | None = None,
    *,
    low_open: bool = False,
    high_open: bool = False,
) -> FieldValueParser:
    """Accept a finite number within [low, high].

    low_open and high_open exclude the respective bound.

    >>> bounded_float(0.0, low_open=True)("0.5")
    0.5
    """

    def parse(value: Any) -> float:
        number = _as_float(value)
        if low is not None:
            if low_open and number <= low:
                raise ValueError("must be > {}, got {}".format(low, number))
            if not low_open and number < low:
                raise ValueError("must be >= {}, got {}".format(low, number))
        if high is not None:
            if high_open and number >= high:
                raise ValueError("must be < {}, got {}".format(high, number))
            if not high_open and number > high:
                raise ValueError(
                    "must be <= {}, got {}".format(high, number)
                )
        return number

    return parse


def positive_int(value: Any) -> int:
    number = _as_int(value)
    if number < 1:
        raise ValueError("must be > 0, got {}".format(number))
    return number


def non_negative_int(value: Any) -> int:
    number = _as_int(value)
    if number < 0:
        raise ValueError("must be >= 0, got {}".format(number))
    return number


def optional_positive_int(value: Any) -> int | None:
    if value is None or (
        isinstance(value, str) and value.strip().lower() in ("", "none")
    ):
        return None
    return positive_int(value)


_TRUE_STRINGS = ("true", "yes", "on", "1")
_FALSE_STRINGS = ("false", "no", "off", "0")


def boolean(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in _TRUE_STRINGS:
            return True
        if lowered in _FALSE_STRINGS:
            return False
    raise ValueError("expected a boolean, got {!r}".format(value))


def path(value: Any) -> Path:
    if not isinstance(value, (str, Path)) or str(value) == "":
        raise ValueError("expected a non-empty path")
    return Path(value)


class ConfigParser:
    """Parse configuration fields from a mapping of raw values.

    Raw values may be JSON values or command-line strings; every value
    parser accepts both. parse_fields() can be called multiple times on
    the same instance.
    """

    def __init__(self, source: Mapping[str, Any]) -> None:
        self._source = dict(source)
        self._not_found = set(self._source)

    def parse_fields(
        self,
        field_template: Sequence[FieldTemplate],
        *,
        exhaustive: bool = False,
    ) -> FieldDict:
        """Parse configuration fields and return a field dict.

        field_template is a list of (name, value_parser, multiplicity)
        tuples. If multiplicity is REQUIRED and the field is missing, a
        ConfigError is raised. If multiplicity is OPTIONAL and the field is
        missing, the returned dict does not contain a key for this field.
        ANY fields expect a list of values (a single value is treated as a
        one-element list) and are always present in the returned dict,
        possibly as an empty list.

        value_parser is a callable that takes one raw value and raises
        ValueError if it can't be parsed.

        If exhaustive is True and the source contains fields not listed in
        the templates of this or previous calls, those fields are reported
        as unknown.

        All errors are collected and raised together as one ConfigError.
        """

        errors: dict[str, str] = {}
        parsed: FieldDict = {}

        def parse_template(
            name: str,
            value_parser: FieldValueParser,
            multiplicity: Multiplicity,
        ) -> None:
            cls = _FIELD_PARSER_CLASSES[multiplicity]
            field_parser = cls(self._source, name, value_parser)
            if field_parser.should_parse():
                try:
                    parsed[name] = field_parser.parse()
                except _FieldError as exc:
                    errors[name] = exc.args[0]
            self._not_found.discard(name)

        for tmpl in field_template:
            parse_template(*tmpl)

        if exhaustive:
            for name in self._not_found:
                errors[name] = "unknown field"

        if len(errors) > 0:
            raise ConfigError(errors)
        return parsed


class _FieldParser:
    def __init__(
        self,
        source: dict[str, Any],
        name: str,
        value_parser: FieldValueParser,
    ) -> None:
        self.source = source
        self.name = name
        self.value_parser = value_parser

    def should_parse(self) -> bool:
        return True

    def parse(self) -> Any:
        raise NotImplementedError()

    def parse_value(self, value: Any) -> Any:
        try:
            return self.value_parser(value)
        except ValueError as exc:
            raise _FieldError(str(exc)) from exc

    @property
    def supplied(self) -> bool:
        return self.name in self.source


class _RequiredFieldParser(_FieldParser):
    def parse(self) -> Any:
        if not self.supplied:
            raise _FieldError("mandatory field missing")
        return self.parse_value(self.source[self.name])


class _OptionalFieldParser(_FieldParser):
    def should_parse(self) -> bool:
        return self.supplied

    def parse(self) -> Any:
        assert self.should_parse()
        return self.parse_value(self.source[self.name])


class _MultiFieldParser(_FieldParser):
    def parse(self) -> list[Any]:
        values = self.source.get(self.name, [])
        if not isinstance(values, list):
            values = [values]
        return [self.parse_value(v) for v in values]


_FIELD_PARSER_CLASSES = {
    Multiplicity.ANY: _MultiFieldParser,
    Multiplicity.REQUIRED: _RequiredFieldParser,
    Multiplicity.OPTIONAL: _OptionalFieldParser,
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "matrix-recovery"
    optimizer: str = "lr-adam"
    optimizers: Tuple[str, ...] = ("hb", "adam", "lr-hb", "lr-adam")
    lr: float = 0.01
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    tau: float = 0.05
    init_rank: int = 8
    r_min: int = 2
    r_max: Optional[int] = None
    max_steps: int = 500
    batch_size: int = 0
    seed: int = 0
    out_dir: Path = Path("runs/default")
    n: int = 32
    true_rank: int = 5
    noise: float = 0.0
    init_scale: float = 1.0
    n_samples: int = 400
    dim: int = 32
    hidden: int = 32
    activation: str = "relu"
    lr_schedule: str = "constant"
    guard_momentum: bool = False
    record_wall_time: bool = False
    checkpoint: Optional[Path] = None
    threads: int = 1

    def policy(self) -> TruncationPolicy:
        return TruncationPolicy(
            tau=self.tau,
            r_min=self.r_min,
            r_max=self.r_max,
            guard_momentum=self.guard_momentum,
        )

    def to_dict(self) -> dict[str, Any]:
        """JSON-compatible representation, loadable by parse_config()."""
        data = asdict(self)
        data["out_dir"] = str(self.out_dir)
        data["checkpoint"] = (
            None if self.checkpoint is None else str(self.checkpoint)
        )
        data["optimizers"] = list(self.optimizers)
        return data


EXPERIMENT_TEMPLATE: list[FieldTemplate] = [
    ("task", choice(*TASKS), Multiplicity.OPTIONAL),
    ("optimizer", choice(*OPTIMIZERS), Multiplicity.OPTIONAL),
    ("optimizers", choice(*OPTIMIZERS), Multiplicity.ANY),
    ("lr", bounded_float(0.0, low_open=True), Multiplicity.OPTIONAL),
    ("gamma", bounded_float(0.0, 1.0), Multiplicity.OPTIONAL),
    ("beta1", bounded_float(0.0, 1.0, high_open=True), Multiplicity.OPTIONAL),
    ("beta2", bounded_float(0.0, 1.0, high_open=True), Multiplicity.OPTIONAL),
    ("eps", bounded_float(0.0, low_open=True), Multiplicity.OPTIONAL),
    ("weight_decay", bounded_float(0.0), Multiplicity.OPTIONAL),
    ("tau", bounded_float(0.0), Multiplicity.OPTIONAL),
    ("init_rank", positive_int, Multiplicity.OPTIONAL),
    ("r_min", positive_int, Multiplicity.OPTIONAL),
    ("r_max", optional_positive_int, Multiplicity.OPTIONAL),
    ("max_steps", non_negative_int, Multiplicity.OPTIONAL),
    ("batch_size", non_negative_int, Multiplicity.OPTIONAL),
    ("seed", non_negative_int, Multiplicity.OPTIONAL),
    ("out_dir", path, Multiplicity.OPTIONAL),
    ("n", positive_int, Multiplicity.OPTIONAL),
    ("true_rank", positive_int, Multiplicity.OPTIONAL),
    ("noise", bounded_float(0.0), Multiplicity.OPTIONAL),
    ("init_scale", bounded_float(0.0, low_open=True), Multiplicity.OPTIONAL),
    ("n_samples", positive_int, Multiplicity.OPTIONAL),
    ("dim", positive_int, Multiplicity.OPTIONAL),
    ("hidden", positive_int, Multiplicity.OPTIONAL),
    ("activation", choice(*ACTIVATIONS), Multiplicity.OPTIONAL),
    ("lr_schedule", choice(*LR_SCHEDULES), Multiplicity.OPTIONAL),
    ("guard_momentum", boolean, Multiplicity.OPTIONAL),
    ("record_wall_time", boolean, Multiplicity.OPTIONAL),
    ("checkpoint", path, Multiplicity.OPTIONAL),
    ("threads", positive_int, Multiplicity.OPTIONAL),
]


def _consistency_errors(cfg: ExperimentConfig) -> dict[str, str]:
    errors: dict[str, str] = {}
    if cfg.r_max is not None and cfg.r_min > cfg.r_max:
        errors["r_min"] = "must not exceed r_max ({})".format(cfg.r_max)
    if cfg.task == "matrix-recovery":
        if cfg.true_rank > cfg.n:
            errors["true_rank"] = "must not exceed n ({})".format(cfg.n)
        if cfg.init_rank > cfg.n:
            errors["init_rank"] = "must not exceed n ({})".format(cfg.n)
    elif cfg.task == "two-class":
        smallest = min(cfg.dim, cfg.hidden)
        if cfg.init_rank > smallest:
            errors["init_rank"] = "must not exceed {}".format(smallest)
    if cfg.task in ("two-class", "custom-checkpoint"):
        if cfg.n_samples < 2 or cfg.n_samples % 2 != 0:
            errors["n_samples"] = "must be a positive even number"
    if cfg.task == "custom-checkpoint" and cfg.checkpoint is None:
        errors["checkpoint"] = "required for task 'custom-checkpoint'"
    return errors


def parse_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """Validate raw field values and build an ExperimentConfig.

    Missing fields take their defaults. Unknown fields, invalid values
    and inconsistent combinations are reported together.

    >>> parse_config({"optimizer": "lr-hb", "lr": "0.1"}).lr
    0.1
    """

    parsed = ConfigParser(data).parse_fields(
        EXPERIMENT_TEMPLATE, exhaustive=True
    )
    optimizers = parsed.pop("optimizers")
    if optimizers:
        parsed["optimizers"] = tuple(optimizers)
    cfg = ExperimentConfig(**parsed)
    errors = _consistency_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def default_threads(environ: Mapping[str, str] = os.environ) -> int:
    raw = environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        return positive_int(raw)
    except ValueError as exc:
        raise ConfigError({"threads": str(exc)}) from exc


def load_config(
    config_path: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] = os.environ,
) -> ExperimentConfig:
    """Read a JSON configuration file and apply field overrides.

    Overrides with value None are ignored. The thread count defaults to the
    DLRT_THREADS environment variable.
    """

    data: dict[str, Any] = {"threads": default_threads(environ)}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as f:
                loaded = json.load(f)
        except OSError as exc:
            raise ConfigError(
                {"config": "cannot read {}: {}".format(config_path, exc)}
            ) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError({"config": "invalid JSON: {}".format(exc)})
        if not isinstance(loaded, dict):
            raise ConfigError({"config": "must be a JSON object"})
        data.update(loaded)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(data)
