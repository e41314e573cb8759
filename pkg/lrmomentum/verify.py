"""The property and convergence suite behind the verify command.

Every check returns CheckReports instead of raising, so that one run
reports all failures at once.
"""

from __future__ import annotations

import logging
import tempfile
from collections.abc import Callable, Iterable, Mapping
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from lrmomentum import LOGGER_NAME
from lrmomentum.checkpoint import load_checkpoint
from lrmomentum.config import parse_config
from lrmomentum.exceptions import VerificationError
from lrmomentum.flow import (
    check_factored_identity,
    counterexample_check,
    energy_study,
    scaling_check,
)
from lrmomentum.harness import (
    METRICS_FILE,
    Trainer,
    build_task,
    run_experiment,
)
from lrmomentum.linalg import frobenius_norm
from lrmomentum.lowrank import (
    TruncationPolicy,
    basis_augmentation,
    factorize,
    project_moment,
    random_factors,
    reconstruct,
)
from lrmomentum.metrics import compression_ratio, low_rank_parameter_count
from lrmomentum.net import (
    MSE,
    Activation,
    Batch,
    Layer,
    LowRankLayer,
    MatrixRecovery,
    accuracy,
    factor_gradient_check,
    finite_difference_check,
    init_network,
    relative_error,
)
from lrmomentum.optim import (
    AdamParams,
    AdamState,
    FullState,
    HeavyBallParams,
    HeavyBallState,
    WeightOracle,
    hb_full_step,
    lr_adam_step,
    lr_hb_step,
)
from lrmomentum.report import CheckReport, failures

Check = Callable[[int], "list[CheckReport]"]

GRADIENT_TOLERANCE = 1e-5

RANK_ADAPTATION_RUN: dict[str, Any] = {
    "task": "matrix-recovery",
    "optimizer": "lr-adam",
    "n": 32,
    "true_rank": 5,
    "init_rank": 20,
    "tau": 0.05,
    "lr": 0.01,
    "lr_schedule": "linear",
    "max_steps": 2000,
}

TWO_CLASS_RUN: dict[str, Any] = {
    "task": "two-class",
    "optimizer": "lr-adam",
    "dim": 32,
    "hidden": 32,
    "init_rank": 4,
    "lr": 0.01,
    "max_steps": 200,
}


def full_rank_equivalence(
    seed: int = 0, sizes: Iterable[int] = (6, 10, 16), steps: int = 50
) -> CheckReport:
    """Low-rank heavy ball at full rank reproduces dense heavy ball."""
    worst = 0.0
    for problem, n in enumerate(sizes):
        rng = np.random.default_rng([seed, problem])
        loss = MatrixRecovery(rng.standard_normal((n, n)))
        oracle = WeightOracle(loss.loss_and_grad)
        w0 = rng.standard_normal((n, n)) / np.sqrt(n)
        params = HeavyBallParams(lr=0.1, gamma=0.1)
        full = FullState.start(w0, params)
        f = factorize(w0, n)
        state = HeavyBallState.zero(n, params)
        policy = TruncationPolicy(tau=0.0, r_min=n, r_max=n)
        for _ in range(steps):
            full, _ = hb_full_step(full, oracle)
            f, state, _ = lr_hb_step(f, state, oracle, policy)
            worst = max(worst, relative_error(reconstruct(f), full.w))
    passed = worst <= 1e-10
    return CheckReport(
        "full-rank-equivalence",
        passed,
        "" if passed else "trajectories diverge",
        {"max_relative_error": worst},
    )


def gradient_check(seed: int = 0) -> CheckReport:
    """Backpropagation and factor gradients against finite differences."""
    rng = np.random.default_rng(seed)
    dims = [5, 8, 6, 3]
    batch = Batch(rng.standard_normal((7, 5)), rng.standard_normal((7, 3)))
    dense = init_network(dims, activation=Activation.TANH, seed=seed)
    low_rank = init_network(
        dims, rank=2, activation=Activation.TANH, seed=seed
    )
    target = MatrixRecovery(rng.standard_normal((6, 5)))
    values = {
        "dense": finite_difference_check(dense, batch, MSE()),
        "low_rank": finite_difference_check(low_rank, batch, MSE()),
        "factors": factor_gradient_check(
            random_factors(6, 5, 2, rng), target.loss_and_grad
        ),
    }
    bad = sorted(k for k, v in values.items() if v > GRADIENT_TOLERANCE)
    return CheckReport(
        "gradients",
        not bad,
        "" if not bad else "mismatch in " + ", ".join(bad),
        values,
    )


def rank_adaptation_check(
    seed: int = 0,
    run: Mapping[str, Any] = RANK_ADAPTATION_RUN,
    max_loss: float = 1e-6,
) -> CheckReport:
    """Rank-adaptive Adam recovers the rank of a noiseless target."""
    cfg = parse_config({**run, "seed": seed})
    row = Trainer(cfg, build_task(cfg)).run()
    rank_ok = row.ranks == (cfg.true_rank,)
    loss_ok = row.loss <= max_loss
    problems = []
    if not rank_ok:
        problems.append("terminal ranks {}".format(list(row.ranks)))
    if not loss_ok:
        problems.append("loss did not converge")
    return CheckReport(
        "rank-adaptation",
        rank_ok and loss_ok,
        "; ".join(problems),
        {"loss": row.loss, "rank": float(row.ranks[0])},
    )


def adam_moment_check(seed: int = 0, steps: int = 100) -> CheckReport:
    """Second moments stay nonnegative; the first step has closed form.

    From zero moments the bias-corrected first step in the augmented
    frame is S̄ − λ G / √(G² + ε).
    """

    rng = np.random.default_rng(seed)
    n, rank = 10, 3
    loss = MatrixRecovery(rng.standard_normal((n, n)))
    oracle = WeightOracle(loss.loss_and_grad)
    params = AdamParams(lr=0.01)
    keep_all = TruncationPolicy(tau=0.0, r_min=1)
    f = random_factors(n, n, rank, rng)

    _, grad_u, grad_v = oracle.grad_at_factors(f)
    u_hat = basis_augmentation(f.u, grad_u)
    v_hat = basis_augmentation(f.v, grad_v)
    s_bar = project_moment(u_hat, f, f.s, v_hat)
    _, g = oracle.grad_at_coeff(u_hat, s_bar, v_hat)
    step = s_bar - params.lr * g / np.sqrt(g**2 + params.eps)
    expected = u_hat @ step @ v_hat.T
    stepped, state, _ = lr_adam_step(
        f, AdamState.zero(rank, params), oracle, keep_all
    )
    first_error = frobenius_norm(
        reconstruct(stepped) - expected
    ) / frobenius_norm(expected)

    policy = TruncationPolicy(tau=0.05, r_min=1)
    smallest = float(np.min(state.s_k))
    for _ in range(steps - 1):
        stepped, state, _ = lr_adam_step(stepped, state, oracle, policy)
        smallest = min(smallest, float(np.min(state.s_k)))
    problems = []
    if smallest < 0.0:
        problems.append("negative second moment")
    if first_error > 1e-12:
        problems.append("first step differs from closed form")
    return CheckReport(
        "adam-moments",
        not problems,
        "; ".join(problems),
        {"min_second_moment": smallest, "first_step_error": first_error},
    )


def _recount(layers: Iterable[Layer]) -> int:
    total = 0
    for layer in layers:
        n_out, n_in = layer.shape
        if isinstance(layer, LowRankLayer):
            total += low_rank_parameter_count(n_out, n_in, layer.rank)
        else:
            total += n_out * n_in
    return total


def compression_check(seed: int = 0) -> CheckReport:
    """Compression formula and the parameter totals of a training run."""
    cfg = parse_config({**TWO_CLASS_RUN, "max_steps": 5, "seed": seed})
    trainer = Trainer(cfg, build_task(cfg))
    row = trainer.run()
    recount = _recount(trainer.net.layers)
    ratio = compression_ratio(1025, 10000)
    problems = []
    if ratio != 89.75:
        problems.append("compression_ratio(1025, 10000) = {}".format(ratio))
    if row.total_params != recount:
        problems.append(
            "reported {} parameters, recounted {}".format(
                row.total_params, recount
            )
        )
    return CheckReport(
        "compression",
        not problems,
        "; ".join(problems),
        {"ratio": ratio, "total_params": float(row.total_params)},
    )


def determinism_check(seed: int = 0) -> CheckReport:
    """Identical runs, also with more threads, give identical metrics."""
    cfg = parse_config({**TWO_CLASS_RUN, "max_steps": 20, "seed": seed})
    contents = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, threads in enumerate((1, 1, 2)):
            run_cfg = replace(cfg, threads=threads, out_dir=Path(tmp) / str(i))
            run_experiment(run_cfg)
            contents.append((run_cfg.out_dir / METRICS_FILE).read_bytes())
    passed = contents[0] == contents[1] == contents[2]
    return CheckReport(
        "determinism", passed, "" if passed else "runs differ", {}
    )


def checkpoint_check(seed: int = 0) -> CheckReport:
    """Saving and loading reproduces every array bit for bit."""
    cfg = parse_config({**TWO_CLASS_RUN, "max_steps": 3, "seed": seed})
    trainer = Trainer(cfg, build_task(cfg))
    trainer.run()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "checkpoint"
        trainer.save(path)
        loaded = load_checkpoint(path)
    same = all(
        np.array_equal(a.weight(), b.weight())
        for a, b in zip(trainer.net.layers, loaded.net.layers)
    ) and all(
        np.array_equal(a.s_v, b.s_v) and np.array_equal(a.s_k, b.s_k)
        for a, b in zip(trainer.states, loaded.states)
        if isinstance(a, AdamState) and isinstance(b, AdamState)
    )
    return CheckReport(
        "checkpoint", same, "" if same else "round trip changed arrays", {}
    )


def naive_ordering_check(seed: int = 0, seeds: int = 5) -> CheckReport:
    """Projected momentum trains at least as well as the naive variant.

    Compares the median final train loss over several seeds on the
    two-class task. Only the ordering is checked, not the size of the gap.
    """

    finals: dict[str, list[float]] = {"lr-adam": [], "lr-adam-naive": []}
    for offset in range(seeds):
        for optimizer, losses in finals.items():
            cfg = parse_config(
                {
                    **TWO_CLASS_RUN,
                    "optimizer": optimizer,
                    "seed": seed + offset,
                }
            )
            losses.append(Trainer(cfg, build_task(cfg)).run().loss)
    projected = float(np.median(finals["lr-adam"]))
    naive = float(np.median(finals["lr-adam-naive"]))
    passed = projected <= naive
    return CheckReport(
        "naive-ordering",
        passed,
        "" if passed else "naive variant reached a lower loss",
        {"median_loss": projected, "median_naive_loss": naive},
    )


def two_class_check(seed: int = 0) -> CheckReport:
    """Low-rank Adam separates the two-class task."""
    cfg = parse_config({**TWO_CLASS_RUN, "seed": seed})
    trainer = Trainer(cfg, build_task(cfg))
    trainer.run()
    assert trainer.task.train is not None
    train_accuracy = accuracy(trainer.net, trainer.task.train)
    passed = train_accuracy >= 0.95
    return CheckReport(
        "two-class",
        passed,
        "" if passed else "train accuracy below 95%",
        {"train_accuracy": train_accuracy},
    )


CHECKS: dict[str, Check] = {
    "counterexample": lambda seed: [counterexample_check()],
    "energy": lambda seed: energy_study(seed=seed)[1],
    "identity": lambda seed: [check_factored_identity(seed=seed)],
    "scaling": lambda seed: [scaling_check(seed=seed)[2]],
    "full-rank-equivalence": lambda seed: [full_rank_equivalence(seed)],
    "gradients": lambda seed: [gradient_check(seed)],
    "rank-adaptation": lambda seed: [rank_adaptation_check(seed)],
    "adam-moments": lambda seed: [adam_moment_check(seed)],
    "compression": lambda seed: [compression_check(seed)],
    "determinism": lambda seed: [determinism_check(seed)],
    "checkpoint": lambda seed: [checkpoint_check(seed)],
    "two-class": lambda seed: [two_class_check(seed)],
    "naive-ordering": lambda seed: [naive_ordering_check(seed)],
}


def run_verification(
    names: Iterable[str] | None = None, seed: int = 0
) -> list[CheckReport]:
    """Run the named checks, or all of them.

    Raises VerificationError listing every failed check; otherwise the
    reports are returned.
    """

    selected = list(CHECKS) if names is None else list(names)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise ValueError("unknown checks: " + ", ".join(unknown))
    logger = logging.getLogger(LOGGER_NAME)
    reports: list[CheckReport] = []
    for name in selected:
        for report in CHECKS[name](seed):
            logger.info("%s", report.summary())
            reports.append(report)
    failed = failures(reports)
    if failed:
        raise VerificationError(failed)
    return reports
