from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np
import pytest
from asserts import (
    assert_almost_equal,
    assert_equal,
    assert_is_instance,
    assert_raises,
    assert_true,
    fail,
)
from dectest import TestCase, before, test

from lrmomentum.checkpoint import load_checkpoint
from lrmomentum.config import OPTIMIZERS, ExperimentConfig, parse_config
from lrmomentum.exceptions import ConfigError
from lrmomentum.harness import (
    CHECKPOINT_DIR,
    COMPARE_FILE,
    CONFIG_FILE,
    ENERGY_FILE,
    METRICS_FILE,
    Trainer,
    build_task,
    compare,
    initial_state,
    optimizer_params,
    prepare_network,
    run_experiment,
    run_flow_study,
)
from lrmomentum.metrics import read_metrics
from lrmomentum.net import DenseLayer, LowRankLayer, MatrixRecovery
from lrmomentum.optim import (
    AdamParams,
    AdamState,
    FullState,
    HeavyBallParams,
    HeavyBallState,
    LoraStates,
)
from lrmomentum_test.testutil import disable_logger

MATRIX_RUN: dict[str, Any] = {
    "task": "matrix-recovery",
    "n": 8,
    "true_rank": 2,
    "init_rank": 4,
    "max_steps": 3,
}

TWO_CLASS_RUN: dict[str, Any] = {
    "task": "two-class",
    "dim": 4,
    "hidden": 8,
    "init_rank": 2,
    "n_samples": 40,
    "batch_size": 16,
    "max_steps": 4,
}


def _config(
    base: dict[str, Any], out_dir: Path, **kwargs: Any
) -> ExperimentConfig:
    return parse_config({**base, "out_dir": str(out_dir), **kwargs})


class BuildTaskTest(TestCase):
    @test
    def matrix_recovery(self) -> None:
        task = build_task(parse_config(MATRIX_RUN))
        assert_is_instance(task.loss, MatrixRecovery)
        assert_equal(1, len(task.net.layers))
        assert_equal((8, 8), task.net.layers[0].shape)
        assert_true(task.train is None)

    @test
    def two_class(self) -> None:
        task = build_task(parse_config(TWO_CLASS_RUN))
        assert task.train is not None and task.val is not None
        assert_equal(40, len(task.train) + len(task.val))
        assert_equal([5, 9], [layer.shape[1] for layer in task.net.layers])
        assert_true(task.net.bias)

    @test
    def same_seed_same_task(self) -> None:
        first = build_task(parse_config(MATRIX_RUN))
        second = build_task(parse_config(MATRIX_RUN))
        assert isinstance(first.loss, MatrixRecovery)
        assert isinstance(second.loss, MatrixRecovery)
        assert_true((first.loss.target == second.loss.target).all())
        assert_true(
            (
                first.net.layers[0].weight() == second.net.layers[0].weight()
            ).all()
        )

    @test
    def init_scale_multiplies_the_initial_weight(self) -> None:
        standard = build_task(parse_config(MATRIX_RUN))
        halved = build_task(parse_config({**MATRIX_RUN, "init_scale": 0.5}))
        assert_true(
            np.allclose(
                0.5 * standard.net.layers[0].weight(),
                halved.net.layers[0].weight(),
                rtol=1e-15,
                atol=0.0,
            )
        )


class PrepareTest(TestCase):
    @before
    def setup_task(self) -> None:
        self.task = build_task(parse_config(MATRIX_RUN))

    @test
    def low_rank_optimizers_factorize(self) -> None:
        cfg = parse_config({**MATRIX_RUN, "optimizer": "lr-hb"})
        net = prepare_network(self.task.net, cfg)
        layer = net.layers[0]
        assert_is_instance(layer, LowRankLayer)
        assert_equal([4], net.ranks())
        params = optimizer_params(cfg)
        assert_is_instance(params, HeavyBallParams)
        assert_is_instance(
            initial_state("lr-hb", layer, params), HeavyBallState
        )

    @test
    def full_rank_optimizers_stay_dense(self) -> None:
        cfg = parse_config({**MATRIX_RUN, "optimizer": "adam"})
        net = prepare_network(self.task.net, cfg)
        assert_is_instance(net.layers[0], DenseLayer)
        state = initial_state("adam", net.layers[0], optimizer_params(cfg))
        assert_is_instance(state, FullState)

    @test
    def adam_and_lora_states(self) -> None:
        cfg = parse_config({**MATRIX_RUN, "weight_decay": 0.1})
        net = prepare_network(self.task.net, cfg)
        params = optimizer_params(cfg)
        assert isinstance(params, AdamParams)
        assert_equal(0.1, params.weight_decay)
        assert_is_instance(
            initial_state("lr-adam", net.layers[0], params), AdamState
        )
        assert_is_instance(
            initial_state("lora-adam", net.layers[0], params), LoraStates
        )


class TrainerTest(TestCase):
    @before
    def setup_logger(self) -> None:
        disable_logger()

    @test
    def linear_schedule(self) -> None:
        cfg = parse_config(
            {**MATRIX_RUN, "lr": 0.1, "lr_schedule": "linear"}
        )
        trainer = Trainer(cfg, build_task(cfg))
        assert_almost_equal(0.1, trainer.learning_rate(), places=15)
        trainer.step()
        assert_almost_equal(0.1 * 2 / 3, trainer.learning_rate(), places=15)

    @test
    def constant_schedule(self) -> None:
        cfg = parse_config({**MATRIX_RUN, "lr": 0.1})
        trainer = Trainer(cfg, build_task(cfg))
        trainer.step()
        assert_equal(0.1, trainer.learning_rate())

    @test
    def run_reaches_max_steps(self) -> None:
        cfg = parse_config(MATRIX_RUN)
        trainer = Trainer(cfg, build_task(cfg))
        row = trainer.run()
        assert_equal(3, row.step)
        assert_equal(3, trainer.steps_done)
        assert_equal(trainer.net.ranks(), list(row.ranks))
        assert_equal(trainer.net.parameter_count, row.total_params)

    @test
    def run_without_steps(self) -> None:
        cfg = parse_config({**MATRIX_RUN, "max_steps": 0})
        row = Trainer(cfg, build_task(cfg)).run()
        assert_equal(0, row.step)
        assert_equal((4,), row.ranks)

    @test
    def learning_rate_reaches_the_states(self) -> None:
        cfg = parse_config(
            {**MATRIX_RUN, "lr": 0.1, "lr_schedule": "linear"}
        )
        trainer = Trainer(cfg, build_task(cfg))
        trainer.step()
        trainer.step()
        state = trainer.states[0]
        assert isinstance(state, AdamState)
        assert_almost_equal(0.1 * 2 / 3, state.params.lr, places=15)


@pytest.mark.parametrize("optimizer", OPTIMIZERS)
def test_every_optimizer_trains(tmp_path: Path, optimizer: str) -> None:
    disable_logger()
    cfg = _config(MATRIX_RUN, tmp_path, optimizer=optimizer, lr=0.05)
    row = run_experiment(cfg)
    rows = read_metrics(tmp_path / METRICS_FILE)
    assert [r["step"] for r in rows] == ["1", "2", "3"]
    assert row.step == 3
    assert all(rank >= 1 for rank in row.ranks)
    assert (tmp_path / CHECKPOINT_DIR).is_dir()


def test_zero_steps_writes_header_only(tmp_path: Path) -> None:
    disable_logger()
    cfg = _config(MATRIX_RUN, tmp_path, max_steps=0)
    run_experiment(cfg)
    text = (tmp_path / METRICS_FILE).read_text(encoding="utf-8")
    assert text == (
        "step,loss,val_metric,ranks,total_params,compression_ratio\n"
    )
    saved = json.loads((tmp_path / CONFIG_FILE).read_text(encoding="utf-8"))
    assert parse_config(saved) == cfg
    checkpoint = load_checkpoint(tmp_path / CHECKPOINT_DIR)
    assert checkpoint.optimizer == "lr-adam"
    assert checkpoint.metadata == {"step": 0, "seed": 0}


def test_wall_time_column(tmp_path: Path) -> None:
    disable_logger()
    cfg = _config(MATRIX_RUN, tmp_path, record_wall_time=True)
    run_experiment(cfg)
    rows = read_metrics(tmp_path / METRICS_FILE)
    assert len(rows) == 3
    assert all(float(r["wall_ms"]) >= 0.0 for r in rows)


def test_runs_are_deterministic(tmp_path: Path) -> None:
    disable_logger()
    contents = []
    for i, threads in enumerate([1, 1, 2]):
        cfg = _config(TWO_CLASS_RUN, tmp_path / str(i), threads=threads)
        run_experiment(cfg)
        contents.append((tmp_path / str(i) / METRICS_FILE).read_bytes())
    assert contents[0] == contents[1] == contents[2]


def test_compare(tmp_path: Path) -> None:
    disable_logger()
    cfg = _config(MATRIX_RUN, tmp_path, optimizers=["hb", "lr-hb"])
    path = compare(cfg)
    assert path == tmp_path / COMPARE_FILE
    rows = read_metrics(path)
    assert [r["optimizer"] for r in rows] == ["hb"] * 3 + ["lr-hb"] * 3
    assert (tmp_path / "hb" / METRICS_FILE).is_file()
    assert (tmp_path / "lr-hb" / CHECKPOINT_DIR).is_dir()


def test_compare_with_explicit_optimizers(tmp_path: Path) -> None:
    disable_logger()
    cfg = _config(MATRIX_RUN, tmp_path, max_steps=1)
    compare(cfg, ["lr-adam"])
    rows = read_metrics(tmp_path / COMPARE_FILE)
    assert [r["optimizer"] for r in rows] == ["lr-adam"]


def test_continue_from_checkpoint(tmp_path: Path) -> None:
    disable_logger()
    first = _config(
        TWO_CLASS_RUN, tmp_path / "first", optimizer="adam", max_steps=2
    )
    run_experiment(first)
    cfg = _config(
        TWO_CLASS_RUN,
        tmp_path / "second",
        task="custom-checkpoint",
        checkpoint=str(tmp_path / "first" / CHECKPOINT_DIR),
    )
    task = build_task(cfg)
    saved = load_checkpoint(tmp_path / "first" / CHECKPOINT_DIR).net
    assert all(
        (a.weight() == b.weight()).all()
        for a, b in zip(task.net.layers, saved.layers)
    )
    row = run_experiment(cfg)
    assert row.step == 4
    assert len(row.ranks) == 2


def test_checkpoint_needs_two_outputs(tmp_path: Path) -> None:
    disable_logger()
    run_experiment(_config(MATRIX_RUN, tmp_path / "mr", max_steps=0))
    cfg = replace(
        parse_config(TWO_CLASS_RUN),
        task="custom-checkpoint",
        checkpoint=tmp_path / "mr" / CHECKPOINT_DIR,
    )
    try:
        build_task(cfg)
    except ConfigError as exc:
        assert list(exc.fields) == ["checkpoint"]
    else:
        fail("ConfigError not raised")


def test_flow_study_counterexample(tmp_path: Path) -> None:
    disable_logger()
    reports = run_flow_study("counterexample", tmp_path / "flow")
    assert [r.name for r in reports] == ["counterexample"]
    assert reports[0].passed
    assert (tmp_path / "flow").is_dir()


def test_flow_study_energy_table(tmp_path: Path) -> None:
    disable_logger()
    reports = run_flow_study("energy", tmp_path)
    assert len(reports) == 2
    lines = (tmp_path / ENERGY_FILE).read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,energy,momentum_sq,residual"
    assert len(lines) == 5002


def test_unknown_flow_study(tmp_path: Path) -> None:
    with assert_raises(ConfigError):
        run_flow_study("stiffness", tmp_path)


def test_default_config_is_valid() -> None:
    assert parse_config(ExperimentConfig().to_dict()) == ExperimentConfig()
