from __future__ import annotations

import logging

import numpy as np
from asserts import assert_less_equal, fail

from lrmomentum import LOGGER_NAME
from lrmomentum.linalg import (
    frobenius_norm,
    orthonormality_error,
    orthonormalize,
)
from lrmomentum.lowrank import LowRankFactors
from lrmomentum.net import MatrixRecovery
from lrmomentum.optim import WeightOracle
from lrmomentum.types import Matrix


def disable_logger() -> None:
    logging.getLogger(LOGGER_NAME).disabled = True


def enable_logger() -> None:
    logging.getLogger(LOGGER_NAME).disabled = False


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_orthonormal(
    generator: np.random.Generator, n: int, rank: int
) -> Matrix:
    return orthonormalize(generator.standard_normal((n, rank)))


def random_lowrank(
    generator: np.random.Generator, n_out: int, n_in: int, rank: int
) -> LowRankFactors:
    """Random factors with a dense, well-conditioned coefficient."""
    s = np.diag(np.linspace(1.0, 0.5, rank))
    s = s + 0.1 * generator.standard_normal((rank, rank))
    return LowRankFactors(
        random_orthonormal(generator, n_out, rank),
        s,
        random_orthonormal(generator, n_in, rank),
    )


def quadratic_oracle(target: Matrix) -> WeightOracle:
    return WeightOracle(MatrixRecovery(target).loss_and_grad)


def assert_matrix_close(
    expected: Matrix, actual: Matrix, rtol: float = 1e-12
) -> None:
    """Assert ‖actual − expected‖_F <= rtol · max(‖expected‖_F, 1)."""
    if expected.shape != actual.shape:
        fail("shape {} != {}".format(actual.shape, expected.shape))
    error = frobenius_norm(actual - expected)
    scale = max(frobenius_norm(expected), 1.0)
    assert_less_equal(
        error,
        rtol * scale,
        "matrices differ by {:.3g} (allowed {:.3g})".format(
            error, rtol * scale
        ),
    )


def assert_orthonormal(q: Matrix, tol: float = 1e-10) -> None:
    error = orthonormality_error(q)
    assert_less_equal(
        error, tol, "columns not orthonormal (error {:.3g})".format(error)
    )


def assert_in_span(basis: Matrix, m: Matrix, tol: float = 1e-10) -> None:
    residual = frobenius_norm(m - basis @ (basis.T @ m))
    assert_less_equal(
        residual, tol, "not in span (residual {:.3g})".format(residual)
    )
