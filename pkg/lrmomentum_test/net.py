from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from asserts import (
    assert_almost_equal,
    assert_equal,
    assert_less,
    assert_less_equal,
    assert_raises,
    assert_true,
)
from dectest import TestCase, before, test

from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.lowrank import LowRankFactors, random_factors, reconstruct
from lrmomentum.net import (
    MSE,
    Activation,
    Batch,
    DenseLayer,
    LowRankLayer,
    MatrixRecovery,
    Network,
    SoftmaxCrossEntropy,
    accuracy,
    backward,
    densify,
    factor_gradient_check,
    factorize_network,
    finite_difference_check,
    forward,
    init_network,
    layer_loss_and_grad,
    loss_value,
    predict,
    relative_error,
)
from lrmomentum.types import Matrix
from lrmomentum_test.testutil import assert_matrix_close, rng

TOLERANCE = 1e-5


class NetworkTest(TestCase):
    @test
    def layers_must_chain(self) -> None:
        with assert_raises(ShapeError):
            Network((DenseLayer(np.ones((3, 2))), DenseLayer(np.ones((2, 4)))))

    @test
    def bias_adds_one_input_column(self) -> None:
        net = Network(
            (DenseLayer(np.ones((3, 3))), DenseLayer(np.ones((2, 4)))),
            bias=True,
        )
        assert_equal(2, net.input_dim)
        assert_equal(2, net.output_dim)

    @test
    def empty(self) -> None:
        with assert_raises(ShapeError):
            Network(())

    @test
    def counts_and_ranks(self) -> None:
        g = rng()
        net = Network(
            (
                LowRankLayer(random_factors(10, 8, 2, g), Activation.RELU),
                DenseLayer(np.ones((3, 10))),
            )
        )
        assert_equal([2, 3], net.ranks())
        assert_equal((10 + 8) * 2 + 4 + 30, net.parameter_count)
        assert_equal(80 + 30, net.dense_parameter_count)

    @test
    def with_layer_replaces_one_layer(self) -> None:
        net = init_network([3, 4, 2], seed=1)
        layer = DenseLayer(np.zeros((2, 4)))
        replaced = net.with_layer(1, layer)
        assert_true(replaced.layers[1] is layer)
        assert_true(replaced.layers[0] is net.layers[0])
        assert_true(net.layers[1] is not layer)


class ForwardTest(TestCase):
    @test
    def single_dense_layer(self) -> None:
        net = Network((DenseLayer(np.array([[2.0, 0.0]])),))
        assert_equal([[2.0]], forward(net, np.array([[1.0, 5.0]])).tolist())

    @test
    def relu_hidden_layer(self) -> None:
        net = Network(
            (
                DenseLayer(np.array([[1.0], [-1.0]]), Activation.RELU),
                DenseLayer(np.array([[1.0, 1.0]])),
            )
        )
        assert_equal(
            [[3.0], [2.0]], forward(net, np.array([[3.0], [-2.0]])).tolist()
        )

    @test
    def bias_column(self) -> None:
        net = Network((DenseLayer(np.array([[1.0, 10.0]])),), bias=True)
        assert_equal([[12.0]], forward(net, np.array([[2.0]])).tolist())

    @test
    def low_rank_matches_densified(self) -> None:
        net = init_network([6, 8, 3], rank=2, activation=Activation.TANH)
        x = rng(2).standard_normal((5, 6))
        assert_matrix_close(forward(densify(net), x), forward(net, x))

    @test
    def wrong_input_width(self) -> None:
        net = init_network([4, 2])
        with assert_raises(ShapeError):
            forward(net, np.ones((3, 5)))


class BackwardTest(TestCase):
    @before
    def setup_batch(self) -> None:
        self.rng = rng(7)
        self.inputs = self.rng.standard_normal((9, 5))

    @test
    def dense_tanh_mse(self) -> None:
        net = init_network([5, 8, 6, 3], activation=Activation.TANH, seed=1)
        batch = Batch(self.inputs, self.rng.standard_normal((9, 3)))
        error = finite_difference_check(net, batch, MSE())
        assert_less_equal(error, TOLERANCE)

    @test
    def low_rank_with_bias(self) -> None:
        net = init_network(
            [5, 8, 3], rank=2, activation=Activation.TANH, bias=True, seed=2
        )
        batch = Batch(self.inputs, self.rng.standard_normal((9, 3)))
        error = finite_difference_check(net, batch, MSE())
        assert_less_equal(error, TOLERANCE)

    @test
    def softmax_cross_entropy(self) -> None:
        net = init_network([5, 6, 2], activation=Activation.TANH, seed=3)
        labels = self.rng.integers(0, 2, size=9)
        batch = Batch(self.inputs, labels)
        error = finite_difference_check(net, batch, SoftmaxCrossEntropy())
        assert_less_equal(error, TOLERANCE)

    @test
    def matrix_recovery(self) -> None:
        target = self.rng.standard_normal((4, 4))
        net = init_network([4, 4], rank=2, seed=4)
        value, grads = backward(net, None, MatrixRecovery(target))
        w = net.layers[0].weight()
        assert_almost_equal(MatrixRecovery(target).value(w), value)
        assert_matrix_close(w - target, grads[0])

    @test
    def matrix_recovery_needs_a_single_linear_layer(self) -> None:
        target = np.zeros((2, 2))
        with assert_raises(ShapeError):
            backward(init_network([2, 2, 2]), None, MatrixRecovery(target))
        with assert_raises(ShapeError):
            backward(
                init_network([2, 2], bias=True), None, MatrixRecovery(target)
            )
        relu = Network((DenseLayer(np.eye(2), Activation.RELU),))
        with assert_raises(ShapeError):
            loss_value(relu, None, MatrixRecovery(target))

    @test
    def missing_batch(self) -> None:
        with assert_raises(ValueError):
            backward(init_network([2, 2]), None, MSE())

    @test
    def non_finite_inputs(self) -> None:
        batch = Batch(np.full((2, 2), np.inf), np.zeros((2, 2)))
        with assert_raises(NumericError):
            backward(init_network([2, 2]), batch, MSE())

    @test
    def layer_oracle_matches_backward(self) -> None:
        net = init_network([5, 4, 3], activation=Activation.TANH, seed=5)
        batch = Batch(self.inputs, self.rng.standard_normal((9, 3)))
        value, grads = backward(net, batch, MSE())
        oracle = layer_loss_and_grad(net, batch, MSE(), 0)
        oracle_value, grad = oracle(net.layers[0].weight())
        assert_equal(value, oracle_value)
        assert_matrix_close(grads[0], grad)

    @test
    def factor_gradients(self) -> None:
        g = rng(8)
        f = random_factors(6, 5, 2, g)
        loss = MatrixRecovery(g.standard_normal((6, 5)))
        error = factor_gradient_check(f, loss.loss_and_grad)
        assert_less_equal(error, TOLERANCE)

    @test
    def error_falls_with_the_step_until_rounding(self) -> None:
        net = init_network([5, 4, 2], activation=Activation.TANH, seed=6)
        batch = Batch(self.inputs, self.rng.standard_normal((9, 2)))
        coarse = finite_difference_check(net, batch, MSE(), h=1e-2)
        fine = finite_difference_check(net, batch, MSE(), h=1e-4)
        rounding = finite_difference_check(net, batch, MSE(), h=1e-10)
        assert_less(fine, coarse / 100.0)
        assert_less(fine, rounding)

    @test
    def vanishing_analytic_gradient(self) -> None:
        loss = MatrixRecovery(np.array([[0.0, 2.0], [0.0, 0.0]]))

        def value_only(w: Matrix) -> tuple[float, Matrix]:
            return loss.value(w), np.zeros_like(w)

        f = LowRankFactors(
            np.array([[1.0], [0.0]]),
            np.array([[1.0]]),
            np.array([[0.0], [1.0]]),
        )
        assert_almost_equal(
            1.0, factor_gradient_check(f, value_only), places=14
        )
        optimum = replace(f, s=np.array([[2.0]]))
        assert_less_equal(
            factor_gradient_check(optimum, loss.loss_and_grad), 1.0
        )

    @test
    def step_must_be_positive(self) -> None:
        net = init_network([2, 2])
        batch = Batch(np.ones((1, 2)), np.ones((1, 2)))
        with assert_raises(ValueError):
            finite_difference_check(net, batch, MSE(), h=0.0)


class LossTest(TestCase):
    @test
    def mse(self) -> None:
        value, grad = MSE().value_and_grad(
            np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])
        )
        assert_equal(2.5, value)
        assert_equal([[1.0, 2.0]], grad.tolist())

    @test
    def mse_shape_mismatch(self) -> None:
        with assert_raises(ShapeError):
            MSE().value_and_grad(np.zeros((2, 2)), np.zeros((2, 3)))

    @test
    def cross_entropy_of_uniform_outputs(self) -> None:
        value, grad = SoftmaxCrossEntropy().value_and_grad(
            np.zeros((2, 2)), np.array([0, 1])
        )
        assert_almost_equal(math.log(2.0), value, places=14)
        expected = np.array([[-0.25, 0.25], [0.25, -0.25]])
        assert_matrix_close(expected, grad, rtol=1e-14)

    @test
    def cross_entropy_needs_labels(self) -> None:
        with assert_raises(ShapeError):
            SoftmaxCrossEntropy().value_and_grad(
                np.zeros((2, 2)), np.zeros((2, 2))
            )


class InitNetworkTest(TestCase):
    @test
    def deterministic(self) -> None:
        first = init_network([4, 6, 2], seed=3)
        second = init_network([4, 6, 2], seed=3)
        for a, b in zip(first.layers, second.layers):
            assert_true(np.array_equal(a.weight(), b.weight()))

    @test
    def output_layer_is_linear(self) -> None:
        net = init_network([4, 6, 6, 2], activation=Activation.TANH)
        activations = [layer.activation for layer in net.layers]
        assert_equal(
            [Activation.TANH, Activation.TANH, Activation.IDENTITY],
            activations,
        )

    @test
    def rank_is_capped(self) -> None:
        net = init_network([4, 6, 2], rank=5)
        assert_equal([4, 2], net.ranks())
        assert_true(all(isinstance(x, LowRankLayer) for x in net.layers))

    @test
    def bias_shapes(self) -> None:
        net = init_network([4, 6, 2], bias=True)
        assert_equal([(6, 5), (2, 7)], [x.shape for x in net.layers])

    @test
    def scale(self) -> None:
        small = init_network([400, 300], scale=0.01, seed=1)
        std = float(np.std(small.layers[0].weight()))
        assert_almost_equal(0.01 / 20.0, std, places=5)

    @test
    def invalid_dimensions(self) -> None:
        with assert_raises(ValueError):
            init_network([3])
        with assert_raises(ValueError):
            init_network([3, 0, 2])

    @test
    def factorize_and_densify(self) -> None:
        net = init_network([5, 4, 3], seed=6)
        low_rank = factorize_network(net, 10)
        assert_equal([4, 3], low_rank.ranks())
        for dense, factored in zip(net.layers, densify(low_rank).layers):
            assert_matrix_close(dense.weight(), factored.weight())
            assert_true(isinstance(factored, DenseLayer))


class AccuracyTest(TestCase):
    @test
    def predictions(self) -> None:
        net = Network((DenseLayer(np.array([[1.0, 0.0], [0.0, 1.0]])),))
        inputs = np.array([[2.0, 1.0], [0.0, 3.0], [5.0, 4.0]])
        assert_equal([0, 1, 0], predict(net, inputs).tolist())
        batch = Batch(inputs, np.array([0, 0, 0]))
        assert_almost_equal(2.0 / 3.0, accuracy(net, batch), places=14)

    @test
    def empty_batch(self) -> None:
        net = init_network([2, 2])
        batch = Batch(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
        assert_equal(0.0, accuracy(net, batch))

    @test
    def batch_lengths_must_agree(self) -> None:
        with assert_raises(ShapeError):
            Batch(np.zeros((3, 2)), np.zeros(2))


@pytest.mark.parametrize(
    "w,target,expected",
    [
        ([[1.0, 0.0]], [[1.0, 0.0]], 0.0),
        ([[0.0, 0.0]], [[3.0, 4.0]], 1.0),
        ([[3.0, 4.0]], [[0.0, 0.0]], 5.0),
    ],
)
def test_relative_error(
    w: list[list[float]], target: list[list[float]], expected: float
) -> None:
    assert relative_error(np.array(w), np.array(target)) == expected


def test_low_rank_layer_applies_factors() -> None:
    f = LowRankFactors(
        np.array([[1.0], [0.0]]), np.array([[2.0]]), np.array([[0.0], [1.0]])
    )
    layer = LowRankLayer(f)
    assert layer.apply_linear(np.array([[0.0, 3.0]])).tolist() == [[6.0, 0.0]]
    assert layer.apply_transpose(np.array([[1.0, 0.0]])).tolist() == [
        [0.0, 2.0]
    ]


def test_forward_through_a_low_rank_layer() -> None:
    g = rng(3)
    f = random_factors(4, 6, 2, g)
    net = Network((LowRankLayer(f, Activation.RELU),), bias=True)
    x = g.standard_normal((7, 5))
    out = forward(net, x)
    assert out.shape == (7, 4)
    assert np.all(out >= 0.0)
    biased = np.hstack([x, np.ones((7, 1))])
    dense = np.maximum(biased @ reconstruct(f).T, 0.0)
    assert_matrix_close(dense, out)
