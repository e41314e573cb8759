"""Feed-forward networks with dense and low-rank layers.

Samples are stored as rows, so a layer maps a (batch × n_in) input to a
(batch × n_out) output through z ↦ σ(z Wᵀ). Backpropagation is written out
by hand for the closed set of layer kinds and activations and returns the
full-shape gradient ∇_W L of every layer.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum
from typing import Protocol, Union

import numpy as np

from lrmomentum.exceptions import NumericError, ShapeError
from lrmomentum.lowrank import (
    LowRankFactors,
    factor_gradients,
    factorize,
    reconstruct,
)
from lrmomentum.types import Labels, LossAndGrad, Matrix


class Activation(Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"

    def apply(self, pre: Matrix) -> Matrix:
        if self is Activation.RELU:
            return np.maximum(pre, 0.0)
        elif self is Activation.TANH:
            return np.tanh(pre)
        else:
            return pre

    def derivative(self, pre: Matrix) -> Matrix:
        if self is Activation.RELU:
            return np.where(pre > 0.0, 1.0, 0.0)
        elif self is Activation.TANH:
            return 1.0 - np.tanh(pre) ** 2
        else:
            return np.ones_like(pre)


@dataclass(frozen=True)
class DenseLayer:
    w: Matrix
    activation: Activation = Activation.IDENTITY

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.w.shape[0]), int(self.w.shape[1])

    @property
    def parameter_count(self) -> int:
        return int(self.w.size)

    def weight(self) -> Matrix:
        return self.w

    def apply_linear(self, z: Matrix) -> Matrix:
        return z @ self.w.T

    def apply_transpose(self, d: Matrix) -> Matrix:
        return d @ self.w


@dataclass(frozen=True)
class LowRankLayer:
    factors: LowRankFactors
    activation: Activation = Activation.IDENTITY

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors.shape

    @property
    def rank(self) -> int:
        return self.factors.rank

    @property
    def parameter_count(self) -> int:
        return self.factors.parameter_count

    def weight(self) -> Matrix:
        return reconstruct(self.factors)

    def apply_linear(self, z: Matrix) -> Matrix:
        f = self.factors
        return ((z @ f.v) @ f.s.T) @ f.u.T

    def apply_transpose(self, d: Matrix) -> Matrix:
        f = self.factors
        return ((d @ f.u) @ f.s) @ f.v.T


Layer = Union[DenseLayer, LowRankLayer]


@dataclass(frozen=True)
class Network:
    """A chain of layers.

    With bias=True every layer input is extended by an always-one column,
    so each weight has one more column than the layer has inputs.
    """

    layers: tuple[Layer, ...]
    bias: bool = False

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        extra = 1 if self.bias else 0
        for previous, layer in zip(self.layers, self.layers[1:]):
            if layer.shape[1] != previous.shape[0] + extra:
                raise ShapeError(
                    "layer with {} inputs cannot follow "
                    "layer with {} outputs".format(
                        layer.shape[1] - extra, previous.shape[0]
                    )
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1] - (1 if self.bias else 0)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    @property
    def dense_parameter_count(self) -> int:
        return sum(
            layer.shape[0] * layer.shape[1] for layer in self.layers
        )

    def ranks(self) -> list[int]:
        """Rank of every layer; dense layers report min(n_out, n_in)."""
        ranks = []
        for layer in self.layers:
            if isinstance(layer, LowRankLayer):
                ranks.append(layer.rank)
            else:
                ranks.append(min(layer.shape))
        return ranks

    def with_layer(self, index: int, layer: Layer) -> Network:
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class Batch:
    inputs: Matrix
    targets: Matrix | Labels

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError(
                "{} inputs but {} targets".format(
                    self.inputs.shape[0], self.targets.shape[0]
                )
            )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


class OutputLoss(Protocol):
    def value_and_grad(
        self, outputs: Matrix, targets: Matrix | Labels
    ) -> tuple[float, Matrix]:
        ...


class MSE:
    """L = ½ · mean over samples of ‖y − t‖²."""

    def value_and_grad(
        self, outputs: Matrix, targets: Matrix | Labels
    ) -> tuple[float, Matrix]:
        if outputs.shape != targets.shape:
            raise ShapeError(
                "outputs {} and targets {} differ".format(
                    outputs.shape, targets.shape
                )
            )
        m = outputs.shape[0]
        diff = outputs - targets
        return 0.5 * float(np.sum(diff**2)) / m, diff / m


class SoftmaxCrossEntropy:
    """Mean cross-entropy of softmax outputs against integer labels."""

    def value_and_grad(
        self, outputs: Matrix, targets: Matrix | Labels
    ) -> tuple[float, Matrix]:
        if targets.ndim != 1 or targets.shape[0] != outputs.shape[0]:
            raise ShapeError("expected one class label per sample")
        m = outputs.shape[0]
        rows = np.arange(m)
        shifted = outputs - np.max(outputs, axis=1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        log_probs = shifted - log_norm
        labels = targets.astype(np.int64)
        loss = -float(np.mean(log_probs[rows, labels]))
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return loss, grad / m


@dataclass(frozen=True)
class MatrixRecovery:
    """L(W) = ½‖W − A‖_F², defined directly on a single weight."""

    target: Matrix

    def value(self, w: Matrix) -> float:
        return 0.5 * float(np.sum((w - self.target) ** 2))

    def gradient(self, w: Matrix) -> Matrix:
        if w.shape != self.target.shape:
            raise ShapeError(
                "weight {} does not match target {}".format(
                    w.shape, self.target.shape
                )
            )
        return w - self.target

    def loss_and_grad(self, w: Matrix) -> tuple[float, Matrix]:
        return self.value(w), self.gradient(w)


LossKind = Union[MSE, SoftmaxCrossEntropy, MatrixRecovery]


def _with_bias(z: Matrix) -> Matrix:
    return np.hstack([z, np.ones((z.shape[0], 1))])


@dataclass(frozen=True)
class _Trace:
    inputs: list[Matrix]
    pre_activations: list[Matrix]
    outputs: Matrix


def _forward_trace(net: Network, inputs: Matrix) -> _Trace:
    if inputs.ndim != 2 or inputs.shape[1] != net.input_dim:
        raise ShapeError(
            "input of shape {} does not fit {} network inputs".format(
                inputs.shape, net.input_dim
            )
        )
    z = inputs
    layer_inputs = []
    pre_activations = []
    for layer in net.layers:
        if net.bias:
            z = _with_bias(z)
        layer_inputs.append(z)
        pre = layer.apply_linear(z)
        pre_activations.append(pre)
        z = layer.activation.apply(pre)
    return _Trace(layer_inputs, pre_activations, z)


def forward(net: Network, inputs: Matrix) -> Matrix:
    """Evaluate the network on a batch of row samples.

    Low-rank layers never materialize their weight.

    >>> from lrmomentum.linalg import as_matrix
    >>> net = Network((DenseLayer(as_matrix([[2.0, 0.0]])),))
    >>> forward(net, as_matrix([[1.0, 5.0]]))
    array([[2.]])
    """

    return _forward_trace(net, inputs).outputs


def _require_matrix_recovery(net: Network) -> LowRankLayer | DenseLayer:
    if len(net.layers) != 1 or net.bias:
        raise ShapeError(
            "matrix recovery needs a single layer without bias"
        )
    layer = net.layers[0]
    if layer.activation is not Activation.IDENTITY:
        raise ShapeError("matrix recovery needs an identity activation")
    return layer


def backward(
    net: Network, batch: Batch | None, loss: LossKind
) -> tuple[float, list[Matrix]]:
    """Return the loss and ∇_W L for every layer.

    A MatrixRecovery loss ignores the batch and evaluates ½‖W − A‖_F² on
    the weight of a single-layer network.
    """

    if isinstance(loss, MatrixRecovery):
        layer = _require_matrix_recovery(net)
        value, grad = loss.loss_and_grad(layer.weight())
        return value, [grad]
    if batch is None:
        raise ValueError("a batch is required for this loss")
    trace = _forward_trace(net, batch.inputs)
    value, d_out = loss.value_and_grad(trace.outputs, batch.targets)
    grads: list[Matrix] = [np.empty((0, 0))] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        d_pre = d_out * layer.activation.derivative(trace.pre_activations[i])
        grads[i] = d_pre.T @ trace.inputs[i]
        if i > 0:
            d_out = layer.apply_transpose(d_pre)
            if net.bias:
                d_out = d_out[:, :-1]
    finite = all(np.all(np.isfinite(g)) for g in grads)
    if not np.isfinite(value) or not finite:
        raise NumericError("non-finite loss or gradient in backward pass")
    return value, grads


def layer_loss_and_grad(
    net: Network, batch: Batch | None, loss: LossKind, index: int
) -> LossAndGrad:
    """Loss and gradient as a function of one layer's dense weight.

    All other layers stay as they are in net.
    """

    activation = net.layers[index].activation

    def loss_and_grad(w: Matrix) -> tuple[float, Matrix]:
        candidate = net.with_layer(index, DenseLayer(w, activation))
        value, grads = backward(candidate, batch, loss)
        return value, grads[index]

    return loss_and_grad


def loss_value(net: Network, batch: Batch | None, loss: LossKind) -> float:
    if isinstance(loss, MatrixRecovery):
        return loss.value(_require_matrix_recovery(net).weight())
    if batch is None:
        raise ValueError("a batch is required for this loss")
    outputs = forward(net, batch.inputs)
    value, _ = loss.value_and_grad(outputs, batch.targets)
    return value


def densify(net: Network) -> Network:
    layers = tuple(
        DenseLayer(layer.weight(), layer.activation) for layer in net.layers
    )
    return replace(net, layers=layers)


def factorize_network(net: Network, rank: int) -> Network:
    """Replace every layer by its truncated SVD.

    The rank is capped at each layer's smaller dimension.
    """

    layers = tuple(
        LowRankLayer(
            factorize(layer.weight(), min(rank, *layer.shape)),
            layer.activation,
        )
        for layer in net.layers
    )
    return replace(net, layers=layers)


def init_network(
    dims: Sequence[int],
    *,
    rank: int | None = None,
    activation: Activation = Activation.RELU,
    bias: bool = False,
    scale: float = 1.0,
    seed: int = 0,
) -> Network:
    """Create a randomly initialized network.

    Hidden layers use the given activation, the output layer is linear.
    Weights are Gaussian with standard deviation scale / √n_in. With a rank,
    every layer is a truncated SVD of its dense initialization.
    """

    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    if any(d < 1 for d in dims):
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    extra = 1 if bias else 0
    layers: list[Layer] = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        act = activation if i < len(dims) - 2 else Activation.IDENTITY
        std = scale / np.sqrt(n_in)
        w = rng.normal(0.0, std, size=(n_out, n_in + extra))
        if rank is None:
            layers.append(DenseLayer(w, act))
        else:
            r = min(rank, n_out, n_in + extra)
            layers.append(LowRankLayer(factorize(w, r), act))
    return Network(tuple(layers), bias=bias)


def _relative_discrepancy(numeric: Matrix, analytic: Matrix) -> float:
    scale = max(
        float(np.max(np.abs(analytic))),
        float(np.max(np.abs(numeric))),
        np.finfo(np.float64).tiny,
    )
    return float(np.max(np.abs(numeric - analytic))) / scale


def finite_difference_check(
    net: Network, batch: Batch | None, loss: LossKind, h: float = 1e-5
) -> float:
    """Compare backward() against central differences of the loss.

    Every weight entry is perturbed by ±h; low-rank layers are checked
    through their densified weight. Returns the largest normwise relative
    discrepancy max|fd − an| / max(max|an|, max|fd|) over all layers.
    """

    if h <= 0.0:
        raise ValueError("h must be > 0")
    dense = densify(net)
    _, grads = backward(dense, batch, loss)
    worst = 0.0
    for index, layer in enumerate(dense.layers):
        assert isinstance(layer, DenseLayer)
        w = layer.w
        numeric = np.zeros_like(w)
        for pos in np.ndindex(*w.shape):
            plus = w.copy()
            plus[pos] += h
            minus = w.copy()
            minus[pos] -= h
            l_plus = loss_value(
                dense.with_layer(index, DenseLayer(plus, layer.activation)),
                batch,
                loss,
            )
            l_minus = loss_value(
                dense.with_layer(index, DenseLayer(minus, layer.activation)),
                batch,
                loss,
            )
            numeric[pos] = (l_plus - l_minus) / (2.0 * h)
        worst = max(worst, _relative_discrepancy(numeric, grads[index]))
    return worst


def factor_gradient_check(
    f: LowRankFactors, loss_and_grad: LossAndGrad, h: float = 1e-5
) -> float:
    """Check factor_gradients() against central differences of L(U S Vᵀ)."""
    if h <= 0.0:
        raise ValueError("h must be > 0")
    _, grad_w = loss_and_grad(reconstruct(f))
    analytic = dict(zip("uvs", factor_gradients(f, grad_w)))
    worst = 0.0
    for name, an in analytic.items():
        base = getattr(f, name)
        numeric = np.zeros_like(base)
        for pos in np.ndindex(*base.shape):
            plus = base.copy()
            plus[pos] += h
            minus = base.copy()
            minus[pos] -= h
            l_plus, _ = loss_and_grad(reconstruct(replace(f, **{name: plus})))
            l_minus, _ = loss_and_grad(
                reconstruct(replace(f, **{name: minus}))
            )
            numeric[pos] = (l_plus - l_minus) / (2.0 * h)
        worst = max(worst, _relative_discrepancy(numeric, an))
    return worst


def predict(net: Network, inputs: Matrix) -> Labels:
    return np.asarray(np.argmax(forward(net, inputs), axis=1), dtype=np.int64)


def accuracy(net: Network, batch: Batch) -> float:
    """Fraction of samples whose largest output matches the label."""
    if len(batch) == 0:
        return 0.0
    return float(np.mean(predict(net, batch.inputs) == batch.targets))


def relative_error(w: Matrix, target: Matrix) -> float:
    norm = float(np.linalg.norm(target))
    if norm == 0.0:
        return float(np.linalg.norm(w))
    return float(np.linalg.norm(w - target)) / norm
