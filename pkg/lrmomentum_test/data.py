from __future__ import annotations

import numpy as np
import pytest
from asserts import (
    assert_almost_equal,
    assert_equal,
    assert_less,
    assert_raises,
    assert_true,
)
from dectest import TestCase, test

from lrmomentum.data import (
    CLASS_MARGIN,
    gen_matrix_recovery,
    gen_two_class,
    sample_batch,
    spectrum,
    split_batch,
)
from lrmomentum.linalg import svd
from lrmomentum.net import Batch
from lrmomentum_test.testutil import rng


class MatrixRecoveryTest(TestCase):
    @test
    def target_has_the_requested_spectrum(self) -> None:
        loss = gen_matrix_recovery(16, 3, seed=2)
        sigma = svd(loss.target).sigma
        for expected, actual in zip([0.5, 0.25, 0.125], sigma[:3]):
            assert_almost_equal(expected, actual, places=12)
        assert_less(float(np.max(sigma[3:])), 1e-12)

    @test
    def deterministic(self) -> None:
        first = gen_matrix_recovery(8, 2, seed=4)
        second = gen_matrix_recovery(8, 2, seed=4)
        other = gen_matrix_recovery(8, 2, seed=5)
        assert_true(np.array_equal(first.target, second.target))
        assert_true(not np.array_equal(first.target, other.target))

    @test
    def noise_makes_the_target_full_rank(self) -> None:
        loss = gen_matrix_recovery(8, 2, noise=1e-3, seed=1)
        sigma = svd(loss.target).sigma
        assert_true(sigma[-1] > 1e-8)

    @test
    def invalid_arguments(self) -> None:
        with assert_raises(ValueError):
            gen_matrix_recovery(4, 5)
        with assert_raises(ValueError):
            gen_matrix_recovery(4, 0)
        with assert_raises(ValueError):
            gen_matrix_recovery(4, 2, noise=-1.0)


class TwoClassTest(TestCase):
    @test
    def balanced_labels(self) -> None:
        batch = gen_two_class(100, 5, seed=3)
        assert_equal((100, 5), batch.inputs.shape)
        assert_equal(50, int(np.sum(batch.targets)))
        assert_equal(np.int64, batch.targets.dtype)

    @test
    def classes_are_separated(self) -> None:
        batch = gen_two_class(2000, 4, seed=1)
        ones = batch.inputs[batch.targets == 1].mean(axis=0)
        zeros = batch.inputs[batch.targets == 0].mean(axis=0)
        distance = float(np.linalg.norm(ones - zeros))
        assert_almost_equal(2.0 * CLASS_MARGIN, distance, places=0)

    @test
    def deterministic(self) -> None:
        first = gen_two_class(10, 3, seed=7)
        second = gen_two_class(10, 3, seed=7)
        assert_true(np.array_equal(first.inputs, second.inputs))
        assert_true(np.array_equal(first.targets, second.targets))

    @test
    def invalid_arguments(self) -> None:
        with assert_raises(ValueError):
            gen_two_class(9, 3)
        with assert_raises(ValueError):
            gen_two_class(0, 3)
        with assert_raises(ValueError):
            gen_two_class(10, 0)


class BatchingTest(TestCase):
    def _batch(self, n: int) -> Batch:
        return Batch(
            np.arange(2.0 * n).reshape(n, 2), np.arange(n, dtype=np.int64)
        )

    @test
    def split(self) -> None:
        train, val = split_batch(self._batch(10), 0.8)
        assert_equal(8, len(train))
        assert_equal(2, len(val))
        assert_equal([8, 9], val.targets.tolist())

    @test
    def split_fraction_must_be_proper(self) -> None:
        with assert_raises(ValueError):
            split_batch(self._batch(10), 1.0)

    @test
    def sample_without_replacement(self) -> None:
        sample = sample_batch(self._batch(20), 5, rng(1))
        rows = sample.targets.tolist()
        assert_equal(5, len(rows))
        assert_equal(sorted(set(rows)), rows)
        assert_equal(
            [[2.0 * r, 2.0 * r + 1.0] for r in rows], sample.inputs.tolist()
        )

    @test
    def sample_is_seeded(self) -> None:
        batch = self._batch(20)
        first = sample_batch(batch, 5, rng(9))
        second = sample_batch(batch, 5, rng(9))
        assert_equal(first.targets.tolist(), second.targets.tolist())


@pytest.mark.parametrize("size", [0, 20, 25])
def test_sample_batch_returns_whole_batch(size: int) -> None:
    batch = Batch(np.zeros((20, 2)), np.zeros(20))
    assert sample_batch(batch, size, rng()) is batch


def test_spectrum() -> None:
    assert spectrum(3).tolist() == [0.5, 0.25, 0.125]
