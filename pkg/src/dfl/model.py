"""Small MLP classifier, SGD training, model averaging and the weight-difference metric."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codec import Reader, Writer
from .crypto import hash_bytes


class ModelError(ValueError):
    pass


class ArchitectureMismatch(ModelError):
    pass


class TrainingDiverged(ModelError):
    """Raised when a training step produces NaN or infinite weights."""


_DESCRIPTOR = re.compile(r"^mlp:(\d+(?:-\d+)+):(relu)$")


@dataclass(frozen=True)
class Architecture:
    """Fully connected ReLU network ending in a softmax over `classes`."""

    input_dim: int
    hidden: tuple[int, ...]
    classes: int

    def __post_init__(self) -> None:
        sizes = (self.input_dim, *self.hidden, self.classes)
        if any(s < 1 for s in sizes) or self.classes < 2:
            raise ModelError(f"invalid layer sizes {sizes}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.classes)

    @property
    def descriptor(self) -> str:
        return "mlp:" + "-".join(str(s) for s in self.sizes) + ":relu"

    @property
    def id(self) -> bytes:
        return hash_bytes(self.descriptor.encode())

    def layer_specs(self) -> list[tuple[str, tuple[int, ...]]]:
        specs = []
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            specs.append((f"w{k}", (fan_in, fan_out)))
            specs.append((f"b{k}", (fan_out,)))
        return specs

    @classmethod
    def parse(cls, descriptor: "str | Architecture") -> "Architecture":
        if isinstance(descriptor, Architecture):
            return descriptor
        m = _DESCRIPTOR.match(descriptor.strip())
        if not m:
            raise ModelError(f"unknown architecture {descriptor!r}")
        sizes = [int(s) for s in m.group(1).split("-")]
        return cls(sizes[0], tuple(sizes[1:-1]), sizes[-1])


def default_architecture(input_dim: int = 32, classes: int = 10, hidden: int = 32) -> Architecture:
    return Architecture(input_dim, (hidden,), classes)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable per-layer flat weight vectors tied to an architecture id."""

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]
    architecture_id: bytes

    def __post_init__(self) -> None:
        if len(self.names) != len(self.arrays):
            raise ModelError("layer names and arrays differ in length")
        frozen = []
        for name, arr in zip(self.names, self.arrays):
            a = np.array(arr, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise ModelError(f"layer {name} contains non-finite weights")
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "arrays", tuple(frozen))

    @classmethod
    def from_layers(cls, layers: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                    architecture_id: bytes) -> "ModelParams":
        items = list(layers.items()) if isinstance(layers, Mapping) else list(layers)
        return cls(tuple(n for n, _ in items), tuple(a for _, a in items), architecture_id)

    @property
    def layers(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(self.names, self.arrays))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.arrays)

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for a in self.arrays:
            out.append(flat[pos:pos + a.size])
            pos += a.size
        if pos != flat.size:
            raise ModelError("flat vector length does not match layers")
        return ModelParams(self.names, tuple(out), self.architecture_id)

    def same_shape(self, other: "ModelParams") -> bool:
        return (self.architecture_id == other.architecture_id and self.names == other.names
                and all(a.size == b.size for a, b in zip(self.arrays, other.arrays)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))

    __hash__ = None  # type: ignore[assignment]

    def encode(self, w: Writer) -> None:
        w.blob(self.architecture_id).u32(len(self.names))
        for name, arr in zip(self.names, self.arrays):
            w.text(name).floats(arr)

    @classmethod
    def decode(cls, r: Reader) -> "ModelParams":
        arch = r.blob()
        n = r.u32()
        names, arrays = [], []
        for _ in range(n):
            names.append(r.text())
            arrays.append(r.floats())
        return cls(tuple(names), tuple(arrays), arch)

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()


def check_architecture(model: ModelParams, arch: Architecture) -> None:
    specs = arch.layer_specs()
    if model.architecture_id != arch.id:
        raise ArchitectureMismatch("architecture id does not match descriptor")
    if list(model.names) != [n for n, _ in specs]:
        raise ArchitectureMismatch(f"layer names {model.names} do not match {arch.descriptor}")
    for (name, shape), arr in zip(specs, model.arrays):
        if arr.size != int(np.prod(shape)):
            raise ArchitectureMismatch(f"layer {name} has {arr.size} weights, expected {shape}")


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Samples:
    """A batch of labeled samples stored column-wise."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ModelError(f"features {x.shape} and labels {y.shape} disagree")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return LabeledSample(self.features[idx], int(self.labels[idx]))
        return Samples(self.features[idx], self.labels[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def empty(cls, dim: int) -> "Samples":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_list(cls, samples: Sequence[LabeledSample]) -> "Samples":
        return cls(np.stack([s.features for s in samples]), np.array([s.label for s in samples]))

    @classmethod
    def concat(cls, parts: Sequence["Samples"]) -> "Samples":
        return cls(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.labels for p in parts]))


def init_model(architecture: "Architecture | str", seed: int) -> ModelParams:
    """He-initialised weights and zero biases, fully determined by `seed`."""
    arch = Architecture.parse(architecture)
    rng = np.random.default_rng(seed)
    layers = []
    for name, shape in arch.layer_specs():
        if name.startswith("w"):
            layers.append((name, rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape).reshape(-1)))
        else:
            layers.append((name, np.zeros(shape[0])))
    return ModelParams.from_layers(layers, arch.id)


def _unpack(model: ModelParams, arch: Architecture) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for k, (fan_in, fan_out) in enumerate(zip(arch.sizes[:-1], arch.sizes[1:])):
        out.append((model.arrays[2 * k].reshape(fan_in, fan_out), model.arrays[2 * k + 1]))
    return out


def logits(model: ModelParams, arch: Architecture, features: np.ndarray) -> np.ndarray:
    layers = _unpack(model, arch)
    h = features
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = layers[-1]
    return h @ w + b


def predict(model: ModelParams, arch: Architecture, features: np.ndarray) -> np.ndarray:
    return np.argmax(logits(model, arch, features), axis=1)


def loss_and_grad(model: ModelParams, arch: Architecture, batch: Samples) -> tuple[float, list[np.ndarray]]:
    """Mean softmax cross-entropy over the batch and its gradient per layer."""
    layers = _unpack(model, arch)
    acts = [batch.features]
    pre = []
    h = batch.features
    for w, b in layers[:-1]:
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    w, b = layers[-1]
    z = h @ w + b
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = len(batch)
    rows = np.arange(n)
    loss = float(-np.mean(np.log(probs[rows, batch.labels] + 1e-300)))

    delta = probs
    delta[rows, batch.labels] -= 1.0
    delta /= n
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(layers))
    for k in range(len(layers) - 1, -1, -1):
        w_k, _ = layers[k]
        grads[2 * k] = (acts[k].T @ delta).reshape(-1)
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ w_k.T) * (pre[k - 1] > 0)
    return loss, grads


def train_step(model: ModelParams, arch: Architecture, batch: Samples, lr: float) -> ModelParams:
    if len(batch) == 0:
        raise ModelError("empty training batch")
    if batch.features.shape[1] != arch.input_dim:
        raise ModelError(f"sample dimension {batch.features.shape[1]} != {arch.input_dim}")
    if lr == 0:
        return model
    # overflow is reported below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        _, grads = loss_and_grad(model, arch, batch)
        updated = [a - lr * g for a, g in zip(model.arrays, grads)]
    if not all(np.all(np.isfinite(u)) for u in updated):
        raise TrainingDiverged("non-finite weights after training step")
    return ModelParams(model.names, tuple(updated), model.architecture_id)


def evaluate(model: ModelParams, arch: Architecture, samples: Samples) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    if len(samples) == 0:
        raise ModelError("cannot evaluate on an empty sample set")
    return float(np.mean(predict(model, arch, samples.features) == samples.labels))


@dataclass(frozen=True)
class BufferEntry:
    generator: bytes
    model: ModelParams
    accuracy: float
    create_time: int = 0


@dataclass
class FedAvgBuffer:
    """Fixed-capacity store of received models; full means an update is due.

    Entries from the same generator accumulate like any other entry.
    """

    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ModelError("buffer capacity must be positive")

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def add(self, entry: BufferEntry) -> bool:
        """Insert an entry; returns True when the buffer has become full."""
        if self.full:
            raise ModelError("buffer already full")
        if not 0.0 <= entry.accuracy <= 1.0:
            raise ModelError(f"accuracy {entry.accuracy} outside [0, 1]")
        self.entries.append(entry)
        return self.full

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def _stack(buffer: FedAvgBuffer, prev: ModelParams) -> np.ndarray:
    for e in buffer.entries:
        if not e.model.same_shape(prev):
            raise ArchitectureMismatch("buffer model does not match the local model")
    return np.stack([e.model.flat() for e in buffer.entries])


def half_fedavg(buffer: FedAvgBuffer, prev: ModelParams) -> ModelParams:
    """Average the buffer uniformly, then average 50/50 with the previous model."""
    if not buffer.entries:
        raise ModelError("empty buffer")
    stacked = _stack(buffer, prev)
    mean = stacked.sum(axis=0) / len(buffer.entries)
    return prev.with_flat((mean + prev.flat()) / 2.0)


def weighted_fedavg(buffer: FedAvgBuffer, reputations: Mapping[bytes, float] | "object",
                    prev: ModelParams) -> ModelParams:
    """Weight each buffered model by reputation x accuracy, then average 50/50 with prev.

    Falls back to `half_fedavg` when every weight is zero.
    """
    if not buffer.entries:
        raise ModelError("empty buffer")
    stacked = _stack(buffer, prev)
    weights = np.array([reputations[e.generator] * e.accuracy for e in buffer.entries])
    total = weights.sum()
    if total == 0.0:
        return half_fedavg(buffer, prev)
    mixed = (weights / total) @ stacked
    return prev.with_flat((mixed + prev.flat()) / 2.0)


def layer_sums(model: ModelParams) -> np.ndarray:
    return np.array([float(a.sum()) for a in model.arrays])


def model_difference(models: Sequence[ModelParams]) -> np.ndarray:
    """Per-layer cyclic mean of absolute differences between adjacent models' layer sums."""
    if len(models) < 2:
        raise ModelError("model difference needs at least two models")
    sums = np.stack([layer_sums(m) for m in models])
    if len({s.shape for s in sums}) != 1:
        raise ArchitectureMismatch("models have different layer counts")
    adjacent = np.abs(np.diff(sums, axis=0)).sum(axis=0)
    wrap = np.abs(sums[0] - sums[-1])
    return (adjacent + wrap) / len(models)
