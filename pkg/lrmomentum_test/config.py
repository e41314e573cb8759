from __future__ import annotations

import json
from pathlib import Path

import pytest
from asserts import (
    assert_equal,
    assert_false,
    assert_in,
    assert_is_none,
    assert_raises,
    assert_true,
    fail,
)
from dectest import TestCase, test

from lrmomentum.config import (
    ConfigParser,
    ExperimentConfig,
    Multiplicity,
    boolean,
    bounded_float,
    choice,
    default_threads,
    load_config,
    optional_positive_int,
    parse_config,
    positive_int,
)
from lrmomentum.exceptions import ConfigError


class ConfigParserTest(TestCase):
    @test
    def parse_nothing(self) -> None:
        assert_equal({}, ConfigParser({}).parse_fields([]))

    @test
    def required_field(self) -> None:
        fields = ConfigParser({"n": "12"}).parse_fields(
            [("n", positive_int, Multiplicity.REQUIRED)]
        )
        assert_equal({"n": 12}, fields)

    @test
    def required_field_missing(self) -> None:
        try:
            ConfigParser({}).parse_fields(
                [("n", positive_int, Multiplicity.REQUIRED)]
            )
        except ConfigError as exc:
            assert_equal({"n": "mandatory field missing"}, exc.fields)
        else:
            fail("ConfigError not raised")

    @test
    def optional_field_missing(self) -> None:
        fields = ConfigParser({}).parse_fields(
            [("n", positive_int, Multiplicity.OPTIONAL)]
        )
        assert_equal({}, fields)

    @test
    def any_field(self) -> None:
        parser = ConfigParser({"opts": ["hb", "adam"], "one": "hb"})
        fields = parser.parse_fields(
            [
                ("opts", choice("hb", "adam"), Multiplicity.ANY),
                ("one", choice("hb", "adam"), Multiplicity.ANY),
                ("none", choice("hb", "adam"), Multiplicity.ANY),
            ]
        )
        assert_equal(
            {"opts": ["hb", "adam"], "one": ["hb"], "none": []}, fields
        )

    @test
    def errors_are_collected(self) -> None:
        parser = ConfigParser({"a": "x", "b": "-1", "c": 3})
        try:
            parser.parse_fields(
                [
                    ("a", positive_int, Multiplicity.OPTIONAL),
                    ("b", positive_int, Multiplicity.OPTIONAL),
                ],
                exhaustive=True,
            )
        except ConfigError as exc:
            assert_equal({"a", "b", "c"}, set(exc.fields))
            assert_equal("unknown field", exc.fields["c"])
            assert_equal("must be > 0, got -1", exc.fields["b"])
        else:
            fail("ConfigError not raised")

    @test
    def exhaustive_across_calls(self) -> None:
        parser = ConfigParser({"a": 1, "b": 2})
        parser.parse_fields([("a", positive_int, Multiplicity.OPTIONAL)])
        fields = parser.parse_fields(
            [("b", positive_int, Multiplicity.OPTIONAL)], exhaustive=True
        )
        assert_equal({"b": 2}, fields)


class ValueParserTest(TestCase):
    @test
    def bounded_float_bounds(self) -> None:
        unit = bounded_float(0.0, 1.0, high_open=True)
        assert_equal(0.0, unit(0))
        assert_equal(0.5, unit("0.5"))
        with assert_raises(ValueError):
            unit(1.0)
        with assert_raises(ValueError):
            bounded_float(0.0, low_open=True)(0.0)

    @test
    def floats_must_be_finite(self) -> None:
        for raw in ("nan", "inf", float("-inf")):
            with assert_raises(ValueError):
                bounded_float()(raw)

    @test
    def booleans_are_not_numbers(self) -> None:
        with assert_raises(ValueError):
            bounded_float()(True)
        with assert_raises(ValueError):
            positive_int(True)

    @test
    def integers(self) -> None:
        assert_equal(3, positive_int(3.0))
        assert_equal(3, positive_int(" 3 "))
        with assert_raises(ValueError):
            positive_int(3.5)
        with assert_raises(ValueError):
            positive_int(0)

    @test
    def optional_integers(self) -> None:
        assert_is_none(optional_positive_int(None))
        assert_is_none(optional_positive_int("none"))
        assert_equal(4, optional_positive_int("4"))

    @test
    def booleans(self) -> None:
        assert_true(boolean("yes"))
        assert_true(boolean(True))
        assert_false(boolean("Off"))
        with assert_raises(ValueError):
            boolean("maybe")

    @test
    def choices(self) -> None:
        with assert_raises(ValueError):
            choice("a", "b")("c")
        with assert_raises(ValueError):
            choice("a", "b")(1)


class ParseConfigTest(TestCase):
    @test
    def defaults(self) -> None:
        cfg = parse_config({})
        assert_equal(ExperimentConfig(), cfg)
        assert_equal("lr-adam", cfg.optimizer)
        assert_equal(("hb", "adam", "lr-hb", "lr-adam"), cfg.optimizers)

    @test
    def string_values(self) -> None:
        cfg = parse_config(
            {
                "optimizer": "lr-hb",
                "lr": "0.1",
                "max_steps": "0",
                "out_dir": "runs/x",
                "r_max": "none",
                "guard_momentum": "true",
            }
        )
        assert_equal("lr-hb", cfg.optimizer)
        assert_equal(0.1, cfg.lr)
        assert_equal(0, cfg.max_steps)
        assert_equal(Path("runs/x"), cfg.out_dir)
        assert_is_none(cfg.r_max)
        assert_true(cfg.guard_momentum)

    @test
    def optimizer_list(self) -> None:
        cfg = parse_config({"optimizers": ["hb", "lora-adam"]})
        assert_equal(("hb", "lora-adam"), cfg.optimizers)

    @test
    def init_scale(self) -> None:
        assert_equal(1.0, parse_config({}).init_scale)
        assert_equal(0.01, parse_config({"init_scale": 0.01}).init_scale)
        with assert_raises(ConfigError):
            parse_config({"init_scale": 0.0})

    @test
    def invalid_values_are_reported_together(self) -> None:
        try:
            parse_config({"lr": -1.0, "optimizer": "sgd", "colour": "red"})
        except ConfigError as exc:
            assert_equal({"lr", "optimizer", "colour"}, set(exc.fields))
            assert_in("sgd", exc.fields["optimizer"])
        else:
            fail("ConfigError not raised")

    @test
    def inconsistent_ranks(self) -> None:
        try:
            parse_config(
                {
                    "r_min": 5,
                    "r_max": 3,
                    "n": 4,
                    "true_rank": 6,
                    "init_rank": 2,
                }
            )
        except ConfigError as exc:
            assert_equal({"r_min", "true_rank"}, set(exc.fields))
        else:
            fail("ConfigError not raised")

    @test
    def two_class_rank_and_samples(self) -> None:
        try:
            parse_config(
                {
                    "task": "two-class",
                    "dim": 4,
                    "hidden": 8,
                    "init_rank": 6,
                    "n_samples": 9,
                }
            )
        except ConfigError as exc:
            assert_equal({"init_rank", "n_samples"}, set(exc.fields))
        else:
            fail("ConfigError not raised")

    @test
    def custom_checkpoint_needs_a_path(self) -> None:
        with assert_raises(ConfigError):
            parse_config({"task": "custom-checkpoint"})
        cfg = parse_config(
            {"task": "custom-checkpoint", "checkpoint": "ckpt"}
        )
        assert_equal(Path("ckpt"), cfg.checkpoint)

    @test
    def policy(self) -> None:
        cfg = parse_config({"tau": 0.1, "r_min": 1, "r_max": 4})
        policy = cfg.policy()
        assert_equal(0.1, policy.tau)
        assert_equal(1, policy.r_min)
        assert_equal(4, policy.r_max)
        assert_false(policy.guard_momentum)

    @test
    def dict_round_trip(self) -> None:
        cfg = parse_config(
            {"optimizers": ["hb"], "checkpoint": "a/b", "seed": 3}
        )
        data = json.loads(json.dumps(cfg.to_dict()))
        assert_equal("a/b", data["checkpoint"])
        assert_equal(["hb"], data["optimizers"])
        assert_equal(cfg, parse_config(data))


class DefaultThreadsTest(TestCase):
    @test
    def unset(self) -> None:
        assert_equal(1, default_threads({}))
        assert_equal(1, default_threads({"DLRT_THREADS": " "}))

    @test
    def from_environment(self) -> None:
        assert_equal(4, default_threads({"DLRT_THREADS": "4"}))

    @test
    def invalid(self) -> None:
        try:
            default_threads({"DLRT_THREADS": "many"})
        except ConfigError as exc:
            assert_equal(["threads"], list(exc.fields))
        else:
            fail("ConfigError not raised")


def test_load_config_without_file() -> None:
    cfg = load_config(None, {"lr": "0.5", "seed": None}, environ={})
    assert cfg.lr == 0.5
    assert cfg.seed == 0
    assert cfg.threads == 1


def test_load_config_overrides_file(tmp_path: Path) -> None:
    config_path = tmp_path / "config.json"
    config_path.write_text(
        json.dumps({"optimizer": "hb", "lr": 0.2, "max_steps": 10}),
        encoding="utf-8",
    )
    cfg = load_config(
        config_path, {"lr": "0.3"}, environ={"DLRT_THREADS": "2"}
    )
    assert cfg.optimizer == "hb"
    assert cfg.lr == 0.3
    assert cfg.max_steps == 10
    assert cfg.threads == 2


def test_load_config_file_wins_over_environment(tmp_path: Path) -> None:
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"threads": 3}), encoding="utf-8")
    cfg = load_config(config_path, environ={"DLRT_THREADS": "2"})
    assert cfg.threads == 3


@pytest.mark.parametrize(
    "content",
    ["{not json", "[1, 2]"],
)
def test_load_config_rejects_bad_files(tmp_path: Path, content: str) -> None:
    config_path = tmp_path / "config.json"
    config_path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        load_config(config_path, environ={})
    assert list(excinfo.value.fields) == ["config"]


def test_load_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", environ={})
