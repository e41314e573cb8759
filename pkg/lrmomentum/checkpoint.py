"""Checkpoint persistence.

A checkpoint is a directory holding two files:

manifest.json
    Format name and version, optimizer kind, the layer list with shapes,
    ranks and activations, per-layer optimizer scalars and a table of all
    arrays with their shape and byte offset.
arrays.bin
    All arrays back to back as little-endian 64-bit floats in column-major
    order.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from lrmomentum import LOGGER_NAME
from lrmomentum.exceptions import CheckpointError, FormatError, IntegrityError
from lrmomentum.linalg import householder_qr, orthonormality_error
from lrmomentum.lowrank import LowRankFactors
from lrmomentum.net import Activation, DenseLayer, Layer, LowRankLayer, Network
from lrmomentum.optim import (
    AdamParams,
    AdamState,
    FullState,
    HeavyBallParams,
    HeavyBallState,
    LoraStates,
    OptimizerParams,
    OptimizerState,
)
from lrmomentum.types import Matrix

FORMAT_NAME = "lrmomentum-checkpoint"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
ARRAYS_FILE = "arrays.bin"

# orthonormality error accepted as is, and the limit for repairing it
ORTHO_TOLERANCE = 1e-8
ORTHO_REPAIR_LIMIT = 1e-4

_DTYPE = np.dtype("<f8")


class Checkpoint(NamedTuple):
    net: Network
    states: list[OptimizerState]
    optimizer: str
    metadata: dict[str, Any]


class _ArrayWriter:
    def __init__(self) -> None:
        self.table: list[dict[str, Any]] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, m: Matrix) -> None:
        data = np.asarray(m, dtype=_DTYPE).tobytes(order="F")
        self.table.append(
            {
                "name": name,
                "rows": int(m.shape[0]),
                "cols": int(m.shape[1]),
                "byte_offset": self.offset,
            }
        )
        self.chunks.append(data)
        self.offset += len(data)


def _params_record(params: OptimizerParams) -> dict[str, Any]:
    if isinstance(params, HeavyBallParams):
        return {"type": "heavy-ball", "lr": params.lr, "gamma": params.gamma}
    return {
        "type": "adam",
        "lr": params.lr,
        "beta1": params.beta1,
        "beta2": params.beta2,
        "eps": params.eps,
        "weight_decay": params.weight_decay,
    }


def _full_record(
    state: FullState, prefix: str, arrays: _ArrayWriter
) -> dict[str, Any]:
    arrays.add(prefix + ".v", state.v)
    if state.k is not None:
        arrays.add(prefix + ".k", state.k)
    return {"n": state.n, "params": _params_record(state.params)}


def _state_record(
    state: OptimizerState, prefix: str, arrays: _ArrayWriter
) -> dict[str, Any]:
    if isinstance(state, HeavyBallState):
        arrays.add(prefix + ".s_v", state.s_v)
        return {"kind": "heavy-ball", "params": _params_record(state.params)}
    elif isinstance(state, AdamState):
        arrays.add(prefix + ".s_v", state.s_v)
        arrays.add(prefix + ".s_k", state.s_k)
        return {
            "kind": "adam",
            "n": state.n,
            "params": _params_record(state.params),
        }
    elif isinstance(state, LoraStates):
        return {
            "kind": "lora",
            "parts": {
                part: _full_record(
                    getattr(state, part), prefix + "." + part, arrays
                )
                for part in ("u", "s", "v")
            },
        }
    else:
        record = _full_record(state, prefix, arrays)
        record["kind"] = "full"
        return record


def _layer_record(
    layer: Layer, prefix: str, arrays: _ArrayWriter
) -> dict[str, Any]:
    n_out, n_in = layer.shape
    record: dict[str, Any] = {
        "n_out": n_out,
        "n_in": n_in,
        "activation": layer.activation.value,
    }
    if isinstance(layer, LowRankLayer):
        record.update(kind="low-rank", rank=layer.rank)
        arrays.add(prefix + ".u", layer.factors.u)
        arrays.add(prefix + ".s", layer.factors.s)
        arrays.add(prefix + ".v", layer.factors.v)
    else:
        record.update(kind="dense", rank=min(n_out, n_in))
        arrays.add(prefix + ".w", layer.w)
    return record


def save_checkpoint(
    path: Path,
    net: Network,
    states: Sequence[OptimizerState],
    optimizer: str,
    metadata: Mapping[str, Any] | None = None,
) -> None:
    """Write network and optimizer states to the directory path."""
    if len(states) != len(net.layers):
        raise ValueError("need exactly one optimizer state per layer")
    arrays = _ArrayWriter()
    layers = [
        _layer_record(layer, "layer{}".format(i), arrays)
        for i, layer in enumerate(net.layers)
    ]
    state_records = [
        _state_record(state, "state{}".format(i), arrays)
        for i, state in enumerate(states)
    ]
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "optimizer": optimizer,
        "bias": net.bias,
        "layers": layers,
        "states": state_records,
        "arrays": arrays.table,
        "metadata": dict(metadata or {}),
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / ARRAYS_FILE, "wb") as f:
            for chunk in arrays.chunks:
                f.write(chunk)
        with open(path / MANIFEST_FILE, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise CheckpointError(path, str(exc)) from exc


@dataclass
class _ArrayReader:
    path: Path
    blob: bytes
    table: dict[str, tuple[int, int, int]]

    def get(self, name: str) -> Matrix:
        try:
            rows, cols, offset = self.table[name]
        except KeyError:
            raise FormatError(
                self.path, "array '{}' missing".format(name)
            ) from None
        count = rows * cols
        m = np.frombuffer(self.blob, dtype=_DTYPE, count=count, offset=offset)
        return np.array(
            m.reshape((rows, cols), order="F"), dtype=np.float64
        )

    def get_optional(self, name: str) -> Matrix | None:
        return self.get(name) if name in self.table else None


def _read_table(
    path: Path, entries: Any, blob_size: int
) -> dict[str, tuple[int, int, int]]:
    table: dict[str, tuple[int, int, int]] = {}
    end = 0
    try:
        for entry in entries:
            rows, cols = int(entry["rows"]), int(entry["cols"])
            offset = int(entry["byte_offset"])
            table[str(entry["name"])] = (rows, cols, offset)
            end = max(end, offset + rows * cols * _DTYPE.itemsize)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, "malformed array table") from exc
    if end != blob_size:
        raise IntegrityError(
            path,
            "array data has {} bytes, manifest expects {}".format(
                blob_size, end
            ),
        )
    return table


def _params_from(path: Path, record: Mapping[str, Any]) -> OptimizerParams:
    kind = record.get("type")
    args = {k: v for k, v in record.items() if k != "type"}
    try:
        if kind == "heavy-ball":
            return HeavyBallParams(**args)
        elif kind == "adam":
            return AdamParams(**args)
    except (TypeError, ValueError) as exc:
        raise FormatError(path, "invalid optimizer parameters") from exc
    raise FormatError(path, "unknown parameter type {!r}".format(kind))


def _full_from(
    path: Path,
    record: Mapping[str, Any],
    prefix: str,
    w: Matrix,
    arrays: _ArrayReader,
) -> FullState:
    return FullState(
        w=w,
        v=arrays.get(prefix + ".v"),
        k=arrays.get_optional(prefix + ".k"),
        n=int(record.get("n", 0)),
        params=_params_from(path, record["params"]),
    )


def _state_from(
    path: Path,
    record: Mapping[str, Any],
    prefix: str,
    layer: Layer,
    arrays: _ArrayReader,
) -> OptimizerState:
    kind = record.get("kind")
    if kind == "heavy-ball":
        params = _params_from(path, record["params"])
        assert isinstance(params, HeavyBallParams)
        return HeavyBallState(arrays.get(prefix + ".s_v"), params)
    elif kind == "adam":
        params = _params_from(path, record["params"])
        assert isinstance(params, AdamParams)
        return AdamState(
            arrays.get(prefix + ".s_v"),
            arrays.get(prefix + ".s_k"),
            int(record["n"]),
            params,
        )
    elif kind == "lora" and isinstance(layer, LowRankLayer):
        f = layer.factors
        parts = record["parts"]
        return LoraStates(
            *(
                _full_from(
                    path, parts[name], prefix + "." + name, w, arrays
                )
                for name, w in (("u", f.u), ("s", f.s), ("v", f.v))
            )
        )
    elif kind == "full":
        return _full_from(path, record, prefix, layer.weight(), arrays)
    raise FormatError(
        path, "state kind {!r} does not fit its layer".format(kind)
    )


def _layer_from(
    path: Path, record: Mapping[str, Any], prefix: str, arrays: _ArrayReader
) -> Layer:
    activation = Activation(record["activation"])
    shape = (int(record["n_out"]), int(record["n_in"]))
    layer: Layer
    if record["kind"] == "low-rank":
        factors = LowRankFactors(
            arrays.get(prefix + ".u"),
            arrays.get(prefix + ".s"),
            arrays.get(prefix + ".v"),
        )
        layer = LowRankLayer(factors, activation)
        if layer.rank != int(record["rank"]):
            raise FormatError(path, "{}: rank mismatch".format(prefix))
    elif record["kind"] == "dense":
        layer = DenseLayer(arrays.get(prefix + ".w"), activation)
    else:
        raise FormatError(
            path, "unknown layer kind {!r}".format(record["kind"])
        )
    if layer.shape != shape:
        raise FormatError(path, "{}: shape mismatch".format(prefix))
    return layer


def _reframe(r_u: Matrix, m: Matrix, r_v: Matrix) -> Matrix:
    return r_u @ m @ r_v.T


def _repair_state(
    state: OptimizerState, r_u: Matrix, r_v: Matrix
) -> OptimizerState:
    # moments follow their weight into the re-orthonormalized frame
    if isinstance(state, HeavyBallState):
        return HeavyBallState(_reframe(r_u, state.s_v, r_v), state.params)
    elif isinstance(state, AdamState):
        root = np.sqrt(state.s_k)
        return AdamState(
            _reframe(r_u, state.s_v, r_v),
            _reframe(r_u, root, r_v) ** 2,
            state.n,
            state.params,
        )
    return state


def _validate_factors(
    path: Path,
    index: int,
    layer: LowRankLayer,
    state: OptimizerState,
) -> tuple[LowRankLayer, OptimizerState]:
    f = layer.factors
    error = max(orthonormality_error(f.u), orthonormality_error(f.v))
    if error <= ORTHO_TOLERANCE:
        return layer, state
    if error > ORTHO_REPAIR_LIMIT:
        raise IntegrityError(
            path,
            "layer {} bases are not orthonormal (error {:.3g})".format(
                index, error
            ),
        )
    logging.getLogger(LOGGER_NAME).warning(
        "re-orthonormalizing layer %d of %s (error %.3g)", index, path, error
    )
    q_u, r_u = householder_qr(f.u)
    q_v, r_v = householder_qr(f.v)
    repaired = LowRankLayer(
        LowRankFactors(q_u, _reframe(r_u, f.s, r_v), q_v), layer.activation
    )
    return repaired, _repair_state(state, r_u, r_v)


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint().

    Orthonormality of low-rank bases is checked, except for LoRA runs,
    whose bases are not kept orthonormal. Bases within 1e-4 of
    orthonormal are repaired by QR with a warning, keeping the weight
    U S Vᵀ unchanged.
    """

    try:
        with open(path / MANIFEST_FILE, encoding="utf-8") as f:
            manifest = json.load(f)
        blob = (path / ARRAYS_FILE).read_bytes()
    except json.JSONDecodeError as exc:
        raise FormatError(path, "manifest is not valid JSON") from exc
    except OSError as exc:
        raise CheckpointError(path, str(exc)) from exc
    if not isinstance(manifest, dict):
        raise FormatError(path, "manifest must be a JSON object")
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(path, "not a checkpoint manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(
            path, "unsupported version {!r}".format(manifest.get("version"))
        )
    arrays = _ArrayReader(
        path, blob, _read_table(path, manifest.get("arrays", []), len(blob))
    )
    optimizer = str(manifest.get("optimizer", ""))
    try:
        layer_records = manifest["layers"]
        state_records = manifest["states"]
        if len(layer_records) != len(state_records):
            raise FormatError(path, "layer and state counts differ")
        layers = [
            _layer_from(path, record, "layer{}".format(i), arrays)
            for i, record in enumerate(layer_records)
        ]
        states = [
            _state_from(path, record, "state{}".format(i), layer, arrays)
            for i, (record, layer) in enumerate(zip(state_records, layers))
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, "malformed manifest: {}".format(exc)) from exc
    if not optimizer.startswith("lora"):
        for i, layer in enumerate(layers):
            if isinstance(layer, LowRankLayer):
                layers[i], states[i] = _validate_factors(
                    path, i, layer, states[i]
                )
    net = Network(tuple(layers), bias=bool(manifest.get("bias", False)))
    return Checkpoint(net, states, optimizer, manifest.get("metadata", {}))
