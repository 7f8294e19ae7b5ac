"""Trainable models and the flat parameter vector they live in.

Two desk-scale models are provided: multinomial logistic regression and a
two-layer tanh MLP, both trained with mini-batch SGD + momentum on softmax
cross-entropy. Parameters are stored as a single flat f32 vector plus a
layout describing the constituent tensors; all arithmetic inside training and
evaluation runs in f64 with a fixed accumulation order, and results round to
f32 once on the way out, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import LayoutMismatchError, ProtocolError, TrainingDivergedError

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat f32 parameter vector with a named-tensor layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", arr)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if arr.ndim != 1 or len(arr) != expected:
            raise LayoutMismatchError(
                f"value count {arr.size} does not match layout total {expected}"
            )

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:  # layout only; values are arrays
        return hash(self.layout)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    feature_dim: int
    num_classes: int
    hidden_dim: int = 32

    def __post_init__(self) -> None:
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind: {self.kind!r}")
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ValueError("feature_dim and num_classes must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")

    def layout(self) -> Layout:
        d, c, h = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == "logreg":
            return (("W", (c, d)), ("b", (c,)))
        return (("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,)))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            kind=d["kind"],
            feature_dim=int(d["feature_dim"]),
            num_classes=int(d["num_classes"]),
            hidden_dim=int(d.get("hidden_dim", 32)),
        )


@dataclass(frozen=True)
class TrainSpec:
    """Hyperparameters for one local training call."""

    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float
    seed: int

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        return cls(
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            learning_rate=float(d["learning_rate"]),
            momentum=float(d["momentum"]),
            seed=int(d["seed"]),
        )


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, deterministic under seed."""
    rng = np.random.default_rng(seed)
    parts: list[np.ndarray] = []
    for name, shape in spec.layout():
        if name.startswith("b"):
            parts.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_out, fan_in = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-bound, bound, size=shape).astype(np.float32).ravel())
    return ParamVector(np.concatenate(parts), spec.layout())


def _unpack(pv: ParamVector) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in pv.layout:
        size = int(np.prod(shape))
        out[name] = pv.values[offset : offset + size].astype(np.float64).reshape(shape)
        offset += size
    return out

def _pack(tensors: dict[str, np.ndarray], layout: Layout) -> ParamVector:
    flat = np.concatenate([tensors[name].ravel() for name, _ in layout])
    return ParamVector(flat.astype(np.float32), layout)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _forward(spec: ModelSpec, t: dict[str, np.ndarray], x: np.ndarray):
    if spec.kind == "logreg":
        return x @ t["W"].T + t["b"], None
    hidden = np.tanh(x @ t["W1"].T + t["b1"])
    return hidden @ t["W2"].T + t["b2"], hidden


def _loss_and_grads(
    spec: ModelSpec, t: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    n = len(x)
    logits, hidden = _forward(spec, t, x)
    probs = _softmax(logits)
    eps = 1e-12  # guards log(0) when softmax saturates in f64
    loss = float(-np.log(probs[np.arange(n), y] + eps).mean())
    diff = probs.copy()
    diff[np.arange(n), y] -= 1.0
    diff /= n
    if spec.kind == "logreg":
        return loss, {"W": diff.T @ x, "b": diff.sum(axis=0)}
    grads = {"W2": diff.T @ hidden, "b2": diff.sum(axis=0)}
    dh = (diff @ t["W2"]) * (1.0 - hidden * hidden)
    grads["W1"] = dh.T @ x
    grads["b1"] = dh.sum(axis=0)
    return loss, grads


def samples_to_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([s.features for s in samples], dtype=np.float64)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def train_local(
    spec: ModelSpec, params: ParamVector, shard, train_spec: TrainSpec
) -> tuple[ParamVector, float, int]:
    """Run E epochs of seeded mini-batch SGD over one client shard.

    Returns the updated parameters, the final epoch's mean cross-entropy,
    and the shard size. The final incomplete mini-batch is kept. Pure in
    (params, shard, train_spec): calling twice gives bit-identical results.
    """
    if len(shard) == 0:
        raise ValueError("cannot train on an empty shard")
    if params.layout != spec.layout():
        raise LayoutMismatchError("parameter layout does not match model spec")
    x, y = samples_to_arrays(shard)
    n = len(shard)
    rng = np.random.default_rng(train_spec.seed)
    tensors = _unpack(params)
    velocity = {name: np.zeros_like(arr) for name, arr in tensors.items()}
    lr, mu = train_spec.learning_rate, train_spec.momentum
    epoch_loss = 0.0
    for _ in range(train_spec.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, train_spec.batch_size):
            idx = order[start : start + train_spec.batch_size]
            loss, grads = _loss_and_grads(spec, tensors, x[idx], y[idx])
            loss_sum += loss * len(idx)
            for name in tensors:
                velocity[name] = mu * velocity[name] + grads[name]
                tensors[name] = tensors[name] - lr * velocity[name]
        epoch_loss = loss_sum / n
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite training loss: {epoch_loss}")
    return _pack(tensors, params.layout), epoch_loss, n


def evaluate(spec: ModelSpec, params: ParamVector, samples) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy over a non-empty sample list."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty sample list")
    x, y = samples_to_arrays(samples)
    tensors = _unpack(params)
    logits, _ = _forward(spec, tensors, x)
    probs = _softmax(logits)
    loss = float(-np.log(probs[np.arange(len(x)), y] + 1e-12).mean())
    accuracy = float((logits.argmax(axis=1) == y).mean())
    return loss, accuracy


def loss_and_gradient(
    spec: ModelSpec, params: ParamVector, samples
) -> tuple[float, np.ndarray]:
    """Full-batch loss and flat f64 gradient; used by gradient checks."""
    x, y = samples_to_arrays(samples)
    tensors = _unpack(params)
    loss, grads = _loss_and_grads(spec, tensors, x, y)
    flat = np.concatenate([grads[name].ravel() for name, _ in params.layout])
    return loss, flat


def loss_at(spec: ModelSpec, layout: Layout, flat_values: np.ndarray, samples) -> float:
    """Loss of an arbitrary f64 flat vector; the finite-difference probe point."""
    x, y = samples_to_arrays(samples)
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        tensors[name] = np.asarray(flat_values[offset : offset + size], dtype=np.float64).reshape(shape)
        offset += size
    logits, _ = _forward(spec, tensors, x)
    probs = _softmax(logits)
    return float(-np.log(probs[np.arange(len(x)), y] + 1e-12).mean())


# --- binary encoding (shared with the wire protocol) ---
#
# u32 layout-entry count; per entry: u16 name length + UTF-8 name + u8 rank +
# rank x u32 dims; then u32 value count + count x f32. All little-endian.

class ByteReader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ProtocolError("parameter encoding truncated")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk


def encode_layout(layout: Layout) -> bytes:
    out = bytearray(struct.pack("<I", len(layout)))
    for name, shape in layout:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ProtocolError("tensor name too long to encode")
        if len(shape) > 0xFF:
            raise ProtocolError("tensor rank too large to encode")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape))
        for dim in shape:
            if not 0 <= dim <= 0xFFFFFFFF:
                raise ProtocolError(f"tensor dim out of u32 range: {dim}")
            out += struct.pack("<I", dim)
    return bytes(out)


def decode_layout(reader: ByteReader) -> Layout:
    try:
        (entry_count,) = struct.unpack("<I", reader.take(4))
        if entry_count > 0xFFFF:
            raise ProtocolError("implausible layout entry count")
        layout: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(entry_count):
            (name_len,) = struct.unpack("<H", reader.take(2))
            name = reader.take(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", reader.take(1))
            dims = tuple(struct.unpack("<I", reader.take(4))[0] for _ in range(rank))
            layout.append((name, dims))
        return tuple(layout)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ProtocolError(f"bad layout encoding: {exc}") from exc


def encode_params(pv: ParamVector) -> bytes:
    out = bytearray(encode_layout(pv.layout))
    out += struct.pack("<I", len(pv.values))
    out += pv.values.astype("<f4").tobytes()
    return bytes(out)


def decode_params(data: bytes) -> ParamVector:
    reader = ByteReader(data)
    layout = decode_layout(reader)
    try:
        (count,) = struct.unpack("<I", reader.take(4))
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").copy()
        if reader.offset != len(data):
            raise ProtocolError("trailing bytes after parameter encoding")
        return ParamVector(values, layout)
    except (struct.error, LayoutMismatchError) as exc:
        raise ProtocolError(f"bad parameter encoding: {exc}") from exc
