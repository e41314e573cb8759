"""Synthetic tasks for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from lrmomentum.linalg import orthonormalize
from lrmomentum.net import Batch, MatrixRecovery

# distance of each class center from the origin, in units of the noise
CLASS_MARGIN = 3.0


def spectrum(true_rank: int) -> np.ndarray:
    """Singular values 2^-1, 2^-2, ... of a matrix recovery target.

    >>> spectrum(3)
    array([0.5  , 0.25 , 0.125])
    """

    return 2.0 ** -np.arange(1, true_rank + 1, dtype=np.float64)


def gen_matrix_recovery(
    n: int, true_rank: int, noise: float = 0.0, seed: int = 0
) -> MatrixRecovery:
    """Quadratic loss ½‖W − A‖² around an n × n target of known rank.

    A = X diag(σ) Yᵀ with orthonormal X, Y and σᵢ = 2^-i, plus elementwise
    Gaussian noise of the given scale.
    """

    if not 1 <= true_rank <= n:
        raise ValueError("true_rank must be in [1, n]")
    if noise < 0.0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    x = orthonormalize(rng.standard_normal((n, true_rank)))
    y = orthonormalize(rng.standard_normal((n, true_rank)))
    target = (x * spectrum(true_rank)) @ y.T
    if noise > 0.0:
        target = target + noise * rng.standard_normal((n, n))
    return MatrixRecovery(target)


def gen_two_class(n_samples: int, dim: int, seed: int = 0) -> Batch:
    """Two Gaussian blobs at ±μ with unit noise and ‖μ‖ = 3.

    Samples are shuffled; labels are 0 for −μ and 1 for +μ.
    """

    if n_samples < 2 or n_samples % 2 != 0:
        raise ValueError("n_samples must be a positive even number")
    if dim < 1:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    mu = CLASS_MARGIN * direction / np.linalg.norm(direction)
    half = n_samples // 2
    labels = np.repeat(np.array([0, 1], dtype=np.int64), half)
    centers = np.where(labels[:, None] == 1, mu, -mu)
    inputs = centers + rng.standard_normal((n_samples, dim))
    order = rng.permutation(n_samples)
    return Batch(inputs[order], labels[order])


def split_batch(
    batch: Batch, train_fraction: float = 0.8
) -> tuple[Batch, Batch]:
    """Split a batch into leading training and trailing validation rows."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    cut = int(len(batch) * train_fraction)
    return (
        Batch(batch.inputs[:cut], batch.targets[:cut]),
        Batch(batch.inputs[cut:], batch.targets[cut:]),
    )


def sample_batch(
    batch: Batch, size: int, rng: np.random.Generator
) -> Batch:
    """Draw size rows without replacement; 0 or a too large size
    returns the whole batch."""
    if size <= 0 or size >= len(batch):
        return batch
    rows = np.sort(rng.choice(len(batch), size=size, replace=False))
    return Batch(batch.inputs[rows], batch.targets[rows])
