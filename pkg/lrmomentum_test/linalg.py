from __future__ import annotations

import math

import numpy as np
import pytest
from asserts import (
    assert_almost_equal,
    assert_equal,
    assert_raises,
    assert_true,
)
from dectest import TestCase, before, test

from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.linalg import (
    as_matrix,
    condition_number,
    elementwise_sqrt,
    frobenius_norm,
    householder_qr,
    identity,
    matmul,
    multi_matmul,
    orthonormal_span,
    orthonormalize,
    pad_or_crop,
    svd,
)
from lrmomentum_test.testutil import (
    assert_matrix_close,
    assert_orthonormal,
    rng,
)


class MatmulTest(TestCase):
    @test
    def identity_left(self) -> None:
        m = as_matrix([[1, 2], [3, 4]])
        assert_equal(m.tolist(), matmul(identity(2), m).tolist())

    @test
    def orthogonal_vectors(self) -> None:
        result = matmul(as_matrix([[1, 0]]), as_matrix([[0], [5]]))
        assert_equal([[0.0]], result.tolist())

    @test
    def hand_computed(self) -> None:
        result = matmul(as_matrix([[1, 2], [3, 4]]), as_matrix([[5], [6]]))
        assert_equal([[17.0], [39.0]], result.tolist())

    @test
    def dimension_mismatch(self) -> None:
        with assert_raises(ShapeError):
            matmul(as_matrix([[1, 2]]), as_matrix([[1, 2]]))

    @test
    def associativity(self) -> None:
        g = rng(3)
        a, b, c = (g.standard_normal((32, 32)) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert_matrix_close(left, right, rtol=1e-12)

    @test
    def multi_matmul_checks_every_pair(self) -> None:
        a = np.ones((2, 3))
        with assert_raises(ShapeError):
            multi_matmul([a, np.ones((3, 4)), np.ones((2, 2))])


class AsMatrixTest(TestCase):
    @test
    def rejects_vectors(self) -> None:
        with assert_raises(ShapeError):
            as_matrix([1.0, 2.0])

    @test
    def rejects_empty(self) -> None:
        with assert_raises(ShapeError):
            as_matrix(np.zeros((0, 3)))

    @test
    def rejects_nan(self) -> None:
        with assert_raises(NumericError):
            as_matrix([[1.0, float("nan")]])


class OrthonormalizeTest(TestCase):
    @test
    def identity_is_kept(self) -> None:
        q = orthonormalize(identity(2))
        assert_matrix_close(identity(2), np.abs(q))

    @test
    def single_column_is_normalized(self) -> None:
        q = orthonormalize(as_matrix([[2], [0]]))
        assert_almost_equal(1.0, abs(q[0, 0]), places=14)
        assert_almost_equal(0.0, q[1, 0], places=14)

    @test
    def rank_deficient_input_is_completed(self) -> None:
        q = orthonormalize(as_matrix([[1, 1], [0, 0], [0, 0]]))
        assert_equal((3, 2), q.shape)
        assert_orthonormal(q)
        assert_almost_equal(1.0, abs(q[0, 0]), places=14)

    @test
    def too_many_columns(self) -> None:
        with assert_raises(ShapeError):
            orthonormalize(np.ones((2, 3)))

    @test
    def random_inputs(self) -> None:
        g = rng(5)
        for rows, cols in [(5, 5), (20, 3), (64, 17)]:
            q = orthonormalize(g.standard_normal((rows, cols)))
            assert_orthonormal(q, tol=1e-10 * math.sqrt(cols))

    @test
    def span_is_capped_at_row_count(self) -> None:
        q = orthonormal_span(rng(1).standard_normal((3, 5)))
        assert_equal((3, 3), q.shape)
        assert_orthonormal(q)

    @test
    def qr_has_nonnegative_diagonal(self) -> None:
        m = rng(2).standard_normal((6, 4))
        q, r = householder_qr(m)
        assert_true(np.all(np.diag(r) >= 0.0))
        assert_matrix_close(m, q @ r)


class SvdTest(TestCase):
    @before
    def setup_generator(self) -> None:
        self.rng = rng(11)

    @test
    def diagonal(self) -> None:
        dec = svd(np.diag([3.0, 1.0]))
        assert_equal([3.0, 1.0], dec.sigma.tolist())
        assert_matrix_close(identity(2), dec.p)
        assert_matrix_close(identity(2), dec.q)

    @test
    def zero_matrix(self) -> None:
        dec = svd(np.zeros((3, 2)))
        assert_equal([0.0, 0.0], dec.sigma.tolist())

    @test
    def nilpotent(self) -> None:
        dec = svd(as_matrix([[0, 2], [0, 0]]))
        assert_almost_equal(2.0, dec.sigma[0], places=14)
        assert_almost_equal(0.0, dec.sigma[1], places=14)

    @test
    def non_finite_input(self) -> None:
        m = np.ones((2, 2))
        m[0, 1] = np.inf
        with assert_raises(NumericError):
            svd(m)

    @test
    def reconstruction_and_orthonormality(self) -> None:
        for shape in [(4, 4), (30, 12), (12, 30), (256, 256)]:
            m = self.rng.standard_normal(shape)
            dec = svd(m)
            assert_matrix_close(m, dec.reconstruct(), rtol=1e-10)
            assert_orthonormal(dec.p, tol=1e-10 * math.sqrt(dec.p.shape[1]))
            assert_orthonormal(dec.q, tol=1e-10 * math.sqrt(dec.q.shape[1]))
            assert_true(np.all(np.diff(dec.sigma) <= 0.0))

    @test
    def sign_convention(self) -> None:
        dec = svd(self.rng.standard_normal((6, 4)))
        for column in dec.p.T:
            assert_true(column[np.argmax(np.abs(column))] > 0.0)

    @test
    def sign_moves_to_the_right_vectors(self) -> None:
        dec = svd(np.diag([-3.0, 1.0]))
        assert_matrix_close(identity(2), dec.p)
        assert_matrix_close(np.diag([-1.0, 1.0]), dec.q)
        assert_equal([3.0, 1.0], dec.sigma.tolist())

    @test
    def deterministic(self) -> None:
        m = self.rng.standard_normal((9, 7))
        first, second = svd(m), svd(m)
        assert_true(np.array_equal(first.p, second.p))
        assert_true(np.array_equal(first.sigma, second.sigma))
        assert_true(np.array_equal(first.q, second.q))

    @test
    def condition_number_of_singular_matrix(self) -> None:
        assert_equal(float("inf"), condition_number(np.zeros((2, 2))))
        assert_almost_equal(
            1e6, condition_number(np.diag([1.0, 1e-6])), places=3
        )


@pytest.mark.parametrize(
    "m,expected",
    [
        ([[1, 0], [0, 1]], math.sqrt(2.0)),
        ([[3, 4]], 5.0),
        ([[1, 0, 0], [0, 0.1, 0], [0, 0, 1e-8]], math.sqrt(1.01 + 1e-16)),
    ],
)
def test_frobenius_norm(m: list[list[float]], expected: float) -> None:
    assert frobenius_norm(as_matrix(m)) == pytest.approx(expected, rel=1e-14)


def test_elementwise_sqrt_rejects_negative_entries() -> None:
    with pytest.raises(NumericError):
        elementwise_sqrt(np.array([[1.0, -1e-300]]))


@pytest.mark.parametrize(
    "rows,cols,expected",
    [
        (1, 1, [[1.0]]),
        (2, 3, [[1.0, 2.0, 0.0], [3.0, 4.0, 0.0]]),
        (3, 1, [[1.0], [3.0], [0.0]]),
    ],
)
def test_pad_or_crop(
    rows: int, cols: int, expected: list[list[float]]
) -> None:
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert pad_or_crop(m, rows, cols).tolist() == expected
