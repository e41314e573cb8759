from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pytest

from lrmomentum import LOGGER_NAME
from lrmomentum.checkpoint import (
    ARRAYS_FILE,
    MANIFEST_FILE,
    load_checkpoint,
    save_checkpoint,
)
from lrmomentum.exceptions import (
    CheckpointError,
    FormatError,
    IntegrityError,
)
from lrmomentum.linalg import orthonormality_error
from lrmomentum.lowrank import LowRankFactors, reconstruct
from lrmomentum.net import Activation, LowRankLayer, Network, init_network
from lrmomentum.optim import (
    AdamParams,
    AdamState,
    FullState,
    HeavyBallParams,
    HeavyBallState,
    LoraStates,
    OptimizerState,
)
from lrmomentum_test.testutil import (
    assert_matrix_close,
    enable_logger,
    random_lowrank,
    rng,
)


def _adam_network() -> tuple[Network, list[OptimizerState]]:
    net = init_network(
        [6, 5, 2], rank=3, activation=Activation.TANH, bias=True, seed=1
    )
    g = rng(2)
    params = AdamParams(lr=0.01, weight_decay=0.1)
    states: list[OptimizerState] = []
    for layer in net.layers:
        assert isinstance(layer, LowRankLayer)
        r = layer.rank
        states.append(
            AdamState(
                g.standard_normal((r, r)), g.random((r, r)), 7, params
            )
        )
    return net, states


def _perturbed(scale: float) -> tuple[Network, list[OptimizerState]]:
    g = rng(3)
    f = random_lowrank(g, 8, 6, 3)
    u = f.u + scale * g.standard_normal(f.u.shape)
    net = Network((LowRankLayer(LowRankFactors(u, f.s, f.v)),))
    state = HeavyBallState(g.standard_normal((3, 3)), HeavyBallParams(0.1))
    return net, [state]


def test_round_trip_is_bit_exact(tmp_path: Path) -> None:
    net, states = _adam_network()
    save_checkpoint(tmp_path, net, states, "lr-adam", {"step": 12})
    loaded = load_checkpoint(tmp_path)
    assert loaded.optimizer == "lr-adam"
    assert loaded.metadata == {"step": 12}
    assert loaded.net.bias
    for a, b in zip(net.layers, loaded.net.layers):
        assert isinstance(a, LowRankLayer) and isinstance(b, LowRankLayer)
        assert a.activation is b.activation
        assert np.array_equal(a.factors.u, b.factors.u)
        assert np.array_equal(a.factors.s, b.factors.s)
        assert np.array_equal(a.factors.v, b.factors.v)
    for sa, sb in zip(states, loaded.states):
        assert isinstance(sa, AdamState) and isinstance(sb, AdamState)
        assert np.array_equal(sa.s_v, sb.s_v)
        assert np.array_equal(sa.s_k, sb.s_k)
        assert sa.n == sb.n
        assert sa.params == sb.params


def test_arrays_are_little_endian_column_major(tmp_path: Path) -> None:
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    net = Network((LowRankLayer(LowRankFactors(np.eye(2), w, np.eye(2))),))
    state = HeavyBallState(np.zeros((2, 2)), HeavyBallParams(0.1))
    save_checkpoint(tmp_path, net, [state], "lr-hb")
    manifest = json.loads((tmp_path / MANIFEST_FILE).read_text("utf-8"))
    entry = next(e for e in manifest["arrays"] if e["name"] == "layer0.s")
    blob = (tmp_path / ARRAYS_FILE).read_bytes()
    values = np.frombuffer(
        blob, dtype="<f8", count=4, offset=entry["byte_offset"]
    )
    assert values.tolist() == [1.0, 3.0, 2.0, 4.0]


def test_dense_and_lora_states(tmp_path: Path) -> None:
    dense = init_network([4, 3], seed=3)
    full = FullState.start(dense.layers[0].weight(), AdamParams(lr=0.1))
    save_checkpoint(tmp_path / "dense", dense, [full], "adam")
    loaded = load_checkpoint(tmp_path / "dense")
    state = loaded.states[0]
    assert isinstance(state, FullState)
    assert state.k is not None
    assert np.array_equal(state.w, full.w)

    f = random_lowrank(rng(4), 5, 4, 2)
    drifted = LowRankFactors(2.0 * f.u, f.s, f.v)
    lora = Network((LowRankLayer(drifted),))
    states = LoraStates.start(drifted, HeavyBallParams(lr=0.1))
    save_checkpoint(tmp_path / "lora", lora, [states], "lora-hb")
    loaded = load_checkpoint(tmp_path / "lora")
    layer = loaded.net.layers[0]
    assert isinstance(layer, LowRankLayer)
    assert np.array_equal(layer.factors.u, drifted.u)
    lora_state = loaded.states[0]
    assert isinstance(lora_state, LoraStates)
    assert lora_state.s.k is None


def test_small_drift_is_repaired(
    tmp_path: Path, caplog: pytest.LogCaptureFixture
) -> None:
    enable_logger()
    net, states = _perturbed(1e-6)
    save_checkpoint(tmp_path, net, states, "lr-hb")
    with caplog.at_level(logging.WARNING, logger=LOGGER_NAME):
        loaded = load_checkpoint(tmp_path)
    assert any("re-orthonormalizing" in m for m in caplog.messages)
    original = net.layers[0]
    layer = loaded.net.layers[0]
    assert isinstance(original, LowRankLayer)
    assert isinstance(layer, LowRankLayer)
    assert orthonormality_error(layer.factors.u) <= 1e-10
    assert_matrix_close(
        reconstruct(original.factors), reconstruct(layer.factors)
    )


def test_large_drift_is_rejected(tmp_path: Path) -> None:
    net, states = _perturbed(0.1)
    save_checkpoint(tmp_path, net, states, "lr-hb")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path)


def test_truncated_arrays(tmp_path: Path) -> None:
    net, states = _adam_network()
    save_checkpoint(tmp_path, net, states, "lr-adam")
    blob = (tmp_path / ARRAYS_FILE).read_bytes()
    (tmp_path / ARRAYS_FILE).write_bytes(blob[:-8])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path)


@pytest.mark.parametrize(
    "manifest",
    [
        "not json",
        "[]",
        json.dumps({"format": "something-else", "version": 1}),
        json.dumps({"format": "lrmomentum-checkpoint", "version": 99}),
    ],
)
def test_bad_manifest(tmp_path: Path, manifest: str) -> None:
    net, states = _adam_network()
    save_checkpoint(tmp_path, net, states, "lr-adam")
    (tmp_path / MANIFEST_FILE).write_text(manifest, encoding="utf-8")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_missing_layer_record(tmp_path: Path) -> None:
    net, states = _adam_network()
    save_checkpoint(tmp_path, net, states, "lr-adam")
    path = tmp_path / MANIFEST_FILE
    manifest = json.loads(path.read_text(encoding="utf-8"))
    del manifest["layers"][0]["activation"]
    path.write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_missing_directory(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_one_state_per_layer(tmp_path: Path) -> None:
    net, states = _adam_network()
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path, net, states[:1], "lr-adam")
