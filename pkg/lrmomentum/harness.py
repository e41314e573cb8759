"""Experiment runs: task construction, the training loop and run outputs.

A run directory holds

* metrics.csv, one row per global step,
* config.json, the configuration the run was started with,
* checkpoint/, the final network and optimizer states.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable, Sequence
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from lrmomentum import LOGGER_NAME
from lrmomentum.checkpoint import load_checkpoint, save_checkpoint
from lrmomentum.config import ExperimentConfig
from lrmomentum.data import (
    gen_matrix_recovery,
    gen_two_class,
    sample_batch,
    split_batch,
)
from lrmomentum.exceptions import ConfigError, NumericError
from lrmomentum.flow import (
    check_factored_identity,
    counterexample_check,
    energy_study,
    scaling_check,
)
from lrmomentum.lowrank import LowRankFactors, TruncationPolicy
from lrmomentum.metrics import (
    MetricsRow,
    MetricsWriter,
    compression_ratio,
    metrics_columns,
    read_metrics,
    write_table,
)
from lrmomentum.net import (
    Activation,
    Batch,
    DenseLayer,
    Layer,
    LossKind,
    LowRankLayer,
    MatrixRecovery,
    Network,
    SoftmaxCrossEntropy,
    accuracy,
    densify,
    factorize_network,
    init_network,
    layer_loss_and_grad,
    loss_value,
    relative_error,
)
from lrmomentum.optim import (
    AdamParams,
    AdamState,
    FullState,
    GradientOracle,
    HeavyBallParams,
    HeavyBallState,
    LoraStates,
    OptimizerParams,
    OptimizerState,
    WeightOracle,
    adam_full_step,
    hb_full_step,
    linear_decay,
    lora_adam_step,
    lora_hb_step,
    lr_adam_naive_step,
    lr_adam_step,
    lr_hb_naive_step,
    lr_hb_step,
)
from lrmomentum.report import CheckReport

METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.json"
CHECKPOINT_DIR = "checkpoint"
COMPARE_FILE = "compare.csv"
ENERGY_FILE = "flow_energy.csv"
SCALING_FILE = "flow_scaling.csv"

HEAVY_BALL_OPTIMIZERS = frozenset({"hb", "lr-hb", "lr-hb-naive", "lora-hb"})
LOW_RANK_OPTIMIZERS = frozenset(
    {
        "lr-hb",
        "lr-hb-naive",
        "lr-adam",
        "lr-adam-naive",
        "lora-adam",
        "lora-hb",
    }
)


@dataclass(frozen=True)
class Task:
    """Network, loss and data of one experiment.

    Matrix recovery has no data, train and val are None.
    """

    net: Network
    loss: LossKind
    train: Batch | None = None
    val: Batch | None = None

    def val_metric(self, net: Network) -> float:
        """Relative error to the target, or validation accuracy."""
        if isinstance(self.loss, MatrixRecovery):
            return relative_error(net.layers[0].weight(), self.loss.target)
        assert self.val is not None
        return accuracy(net, self.val)


def _two_class_task(net: Network, cfg: ExperimentConfig) -> Task:
    data = gen_two_class(cfg.n_samples, net.input_dim, seed=cfg.seed)
    train, val = split_batch(data)
    return Task(net, SoftmaxCrossEntropy(), train, val)


def build_task(cfg: ExperimentConfig) -> Task:
    # the network initialization draws from its own stream
    init_seed = cfg.seed + 1
    if cfg.task == "matrix-recovery":
        loss = gen_matrix_recovery(
            cfg.n, cfg.true_rank, noise=cfg.noise, seed=cfg.seed
        )
        net = init_network(
            [cfg.n, cfg.n],
            activation=Activation.IDENTITY,
            scale=cfg.init_scale,
            seed=init_seed,
        )
        return Task(net, loss)
    elif cfg.task == "two-class":
        net = init_network(
            [cfg.dim, cfg.hidden, 2],
            activation=Activation(cfg.activation),
            bias=True,
            scale=cfg.init_scale,
            seed=init_seed,
        )
        return _two_class_task(net, cfg)
    elif cfg.task == "custom-checkpoint":
        assert cfg.checkpoint is not None
        net = load_checkpoint(cfg.checkpoint).net
        if net.output_dim != 2:
            raise ConfigError(
                {
                    "checkpoint": "network has {} outputs, "
                    "two-class data needs 2".format(net.output_dim)
                }
            )
        return _two_class_task(net, cfg)
    raise ConfigError({"task": "unknown value {!r}".format(cfg.task)})


def prepare_network(net: Network, cfg: ExperimentConfig) -> Network:
    """Bring every layer into the representation the optimizer needs."""
    if cfg.optimizer in LOW_RANK_OPTIMIZERS:
        return factorize_network(net, cfg.init_rank)
    return densify(net)


def optimizer_params(cfg: ExperimentConfig) -> OptimizerParams:
    if cfg.optimizer in HEAVY_BALL_OPTIMIZERS:
        return HeavyBallParams(lr=cfg.lr, gamma=cfg.gamma)
    return AdamParams(
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def initial_state(
    optimizer: str, layer: Layer, params: OptimizerParams
) -> OptimizerState:
    if optimizer in ("hb", "adam"):
        return FullState.start(layer.weight(), params)
    assert isinstance(layer, LowRankLayer)
    if optimizer.startswith("lora"):
        return LoraStates.start(layer.factors, params)
    elif isinstance(params, HeavyBallParams):
        return HeavyBallState.zero(layer.rank, params)
    else:
        return AdamState.zero(layer.rank, params)


def _with_lr(state: OptimizerState, lr: float) -> OptimizerState:
    if isinstance(state, LoraStates):
        return LoraStates(
            *(replace(s, params=replace(s.params, lr=lr)) for s in state)
        )
    return replace(state, params=replace(state.params, lr=lr))


LayerStep = Callable[
    [Layer, OptimizerState, GradientOracle, TruncationPolicy],
    "tuple[Layer, OptimizerState, float]",
]
_FactorStep = Callable[
    [LowRankFactors, Any, GradientOracle, TruncationPolicy],
    "tuple[LowRankFactors, Any, float]",
]
_FullStep = Callable[[FullState, GradientOracle], "tuple[FullState, float]"]
_LoraStep = Callable[
    [LowRankFactors, LoraStates, GradientOracle],
    "tuple[LowRankFactors, LoraStates, float]",
]


def _dense_step(step: _FullStep) -> LayerStep:
    def run(
        layer: Layer,
        state: OptimizerState,
        oracle: GradientOracle,
        policy: TruncationPolicy,
    ) -> tuple[Layer, OptimizerState, float]:
        assert isinstance(state, FullState)
        new_state, loss = step(state, oracle)
        return DenseLayer(new_state.w, layer.activation), new_state, loss

    return run


def _low_rank_step(step: _FactorStep) -> LayerStep:
    def run(
        layer: Layer,
        state: OptimizerState,
        oracle: GradientOracle,
        policy: TruncationPolicy,
    ) -> tuple[Layer, OptimizerState, float]:
        assert isinstance(layer, LowRankLayer)
        f, new_state, loss = step(layer.factors, state, oracle, policy)
        return LowRankLayer(f, layer.activation), new_state, loss

    return run


def _lora_step(step: _LoraStep) -> LayerStep:
    def run(
        layer: Layer,
        state: OptimizerState,
        oracle: GradientOracle,
        policy: TruncationPolicy,
    ) -> tuple[Layer, OptimizerState, float]:
        assert isinstance(layer, LowRankLayer)
        assert isinstance(state, LoraStates)
        f, new_states, loss = step(layer.factors, state, oracle)
        return LowRankLayer(f, layer.activation), new_states, loss

    return run


_LAYER_STEPS: dict[str, LayerStep] = {
    "hb": _dense_step(hb_full_step),
    "adam": _dense_step(adam_full_step),
    "lr-hb": _low_rank_step(lr_hb_step),
    "lr-hb-naive": _low_rank_step(lr_hb_naive_step),
    "lr-adam": _low_rank_step(lr_adam_step),
    "lr-adam-naive": _low_rank_step(lr_adam_naive_step),
    "lora-adam": _lora_step(lora_adam_step),
    "lora-hb": _lora_step(lora_hb_step),
}


class Trainer:
    """Global training steps of one optimizer over all layers.

    Every layer's gradient is taken on the network as it was at the start
    of the global step. Layer updates are therefore independent of each
    other and of the number of worker threads.
    """

    def __init__(self, cfg: ExperimentConfig, task: Task) -> None:
        self.cfg = cfg
        self.task = task
        self.net = prepare_network(task.net, cfg)
        params = optimizer_params(cfg)
        self.states: list[OptimizerState] = [
            initial_state(cfg.optimizer, layer, params)
            for layer in self.net.layers
        ]
        self.policy = cfg.policy()
        self.steps_done = 0
        self._layer_step = _LAYER_STEPS[cfg.optimizer]
        self._rng = np.random.default_rng([cfg.seed, 2])
        self._logger = logging.getLogger(LOGGER_NAME)

    def learning_rate(self) -> float:
        if self.cfg.lr_schedule == "linear":
            return linear_decay(
                self.cfg.lr, self.steps_done, self.cfg.max_steps
            )
        return self.cfg.lr

    def step(self, executor: Executor | None = None) -> float:
        """Advance all layers by one step and return the batch loss.

        On a numeric failure the trainer is left at the previous step.
        """

        lr = self.learning_rate()
        batch = None
        if self.task.train is not None:
            batch = sample_batch(
                self.task.train, self.cfg.batch_size, self._rng
            )
        snapshot = self.net
        states = [_with_lr(s, lr) for s in self.states]

        def run(index: int) -> tuple[Layer, OptimizerState, float]:
            oracle = WeightOracle(
                layer_loss_and_grad(snapshot, batch, self.task.loss, index)
            )
            return self._layer_step(
                snapshot.layers[index], states[index], oracle, self.policy
            )

        indices = range(len(snapshot.layers))
        if executor is None:
            results = [run(i) for i in indices]
        else:
            results = list(executor.map(run, indices))
        net = replace(snapshot, layers=tuple(r[0] for r in results))
        if net.ranks() != snapshot.ranks():
            self._logger.debug(
                "step %d: ranks %s -> %s",
                self.steps_done + 1,
                snapshot.ranks(),
                net.ranks(),
            )
        self.net = net
        self.states = [r[1] for r in results]
        self.steps_done += 1
        return results[0][2]

    def metrics(self, wall_ms: float | None = None) -> MetricsRow:
        net = self.net
        return MetricsRow(
            step=self.steps_done,
            loss=loss_value(net, self.task.train, self.task.loss),
            val_metric=self.task.val_metric(net),
            ranks=tuple(net.ranks()),
            total_params=net.parameter_count,
            compression_ratio=compression_ratio(
                net.parameter_count, net.dense_parameter_count
            ),
            wall_ms=wall_ms,
        )

    def run(self, writer: MetricsWriter | None = None) -> MetricsRow:
        """Run the remaining steps up to max_steps.

        Returns the metrics of the last step, or of the current state if
        no step remains.
        """

        row = self.metrics()
        executor = None
        if self.cfg.threads > 1 and len(self.net.layers) > 1:
            executor = ThreadPoolExecutor(max_workers=self.cfg.threads)
        try:
            while self.steps_done < self.cfg.max_steps:
                started = time.perf_counter()
                self.step(executor)
                wall_ms = None
                if self.cfg.record_wall_time:
                    wall_ms = (time.perf_counter() - started) * 1000.0
                row = self.metrics(wall_ms)
                if writer is not None:
                    writer.write(row)
                self._logger.debug(
                    "step %d: loss %.6g, ranks %s",
                    row.step,
                    row.loss,
                    list(row.ranks),
                )
        finally:
            if executor is not None:
                executor.shutdown()
        return row

    def save(self, path: Path) -> None:
        save_checkpoint(
            path,
            self.net,
            self.states,
            self.cfg.optimizer,
            {"step": self.steps_done, "seed": self.cfg.seed},
        )


def run_experiment(cfg: ExperimentConfig) -> MetricsRow:
    """Train with cfg and write metrics, configuration and checkpoint.

    On a numeric failure the rows written so far stay in the metrics
    file, no checkpoint is written and the error is re-raised.
    """

    logger = logging.getLogger(LOGGER_NAME)
    trainer = Trainer(cfg, build_task(cfg))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out_dir / CONFIG_FILE, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(
        "%s on %s: %d steps, seed %d",
        cfg.optimizer,
        cfg.task,
        cfg.max_steps,
        cfg.seed,
    )
    with MetricsWriter(
        cfg.out_dir / METRICS_FILE, cfg.record_wall_time
    ) as writer:
        try:
            row = trainer.run(writer)
        except NumericError:
            logger.exception(
                "%s run aborted at step %d",
                cfg.optimizer,
                trainer.steps_done + 1,
            )
            raise
    trainer.save(cfg.out_dir / CHECKPOINT_DIR)
    logger.info(
        "%s finished: loss %.6g, val_metric %.6g, ranks %s, "
        "compression %.2f%%",
        cfg.optimizer,
        row.loss,
        row.val_metric,
        list(row.ranks),
        row.compression_ratio,
    )
    return row


def compare(
    cfg: ExperimentConfig, optimizers: Sequence[str] | None = None
) -> Path:
    """Run several optimizers on the same task and seed.

    Each run goes to out_dir/<optimizer>/; the joined metrics are written
    to out_dir/compare.csv with a leading optimizer column.
    """

    names = tuple(optimizers) if optimizers else cfg.optimizers
    rows: list[dict[str, str]] = []
    for name in names:
        run_cfg = replace(cfg, optimizer=name, out_dir=cfg.out_dir / name)
        run_experiment(run_cfg)
        for row in read_metrics(run_cfg.out_dir / METRICS_FILE):
            rows.append({"optimizer": name, **row})
    path = cfg.out_dir / COMPARE_FILE
    columns = ["optimizer"] + metrics_columns(cfg.record_wall_time)
    write_table(path, columns, rows)
    return path


FlowStudy = Callable[[Path, int], "list[CheckReport]"]


def _energy_study(out_dir: Path, seed: int) -> list[CheckReport]:
    trace, reports = energy_study(seed=seed)
    write_table(
        out_dir / ENERGY_FILE,
        ["t", "energy", "momentum_sq", "residual"],
        [
            {
                "t": repr(r.t),
                "energy": repr(r.energy),
                "momentum_sq": repr(r.momentum_sq),
                "residual": repr(r.residual),
            }
            for r in trace
        ],
    )
    return reports


def _scaling_study(out_dir: Path, seed: int) -> list[CheckReport]:
    well, ill, report = scaling_check(seed=seed)
    write_table(
        out_dir / SCALING_FILE,
        ["lr", "error", "ill_conditioned_error"],
        [
            {
                "lr": repr(lr),
                "error": repr(error),
                "ill_conditioned_error": repr(ill_error),
            }
            for lr, error, ill_error in zip(well.lrs, well.errors, ill.errors)
        ],
    )
    return [report]


FLOW_STUDIES: dict[str, FlowStudy] = {
    "counterexample": lambda out_dir, seed: [counterexample_check()],
    "energy": _energy_study,
    "identity": lambda out_dir, seed: [check_factored_identity(seed=seed)],
    "scaling": _scaling_study,
}


def run_flow_study(
    study: str, out_dir: Path, seed: int = 0
) -> list[CheckReport]:
    """Run one flow study, or all of them for study "all"."""
    if study == "all":
        names = list(FLOW_STUDIES)
    elif study in FLOW_STUDIES:
        names = [study]
    else:
        raise ConfigError({"study": "unknown value {!r}".format(study)})
    out_dir.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger(LOGGER_NAME)
    reports: list[CheckReport] = []
    for name in names:
        logger.info("running flow study %s", name)
        reports.extend(FLOW_STUDIES[name](out_dir, seed))
    return reports

