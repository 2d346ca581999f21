"""Datasets, per-node label partitions and the two attacker behaviours."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .model import Architecture, ModelParams, Samples

POISON_MAX_WEIGHT = 0.001


class PartitionError(ValueError):
    pass


class Behavior(str, Enum):
    HONEST = "honest"
    OBSERVER = "observer"
    DATASET_POISONER = "dataset_poisoner"
    MODEL_POISONER = "model_poisoner"

    @property
    def trains(self) -> bool:
        return self is not Behavior.OBSERVER

    @property
    def broadcasts(self) -> bool:
        return self is not Behavior.OBSERVER


def node_rng(master_seed: int, node_id: int, stream: str = "data") -> np.random.Generator:
    """Independent generator per (seed, node, purpose)."""
    tag = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "big")
    return np.random.default_rng([master_seed, node_id, tag])


@dataclass(frozen=True, eq=False)
class PartitionSpec:
    kind: str
    seed: int
    probabilities: np.ndarray
    alpha: float | None = None

    @property
    def node_count(self) -> int:
        return self.probabilities.shape[0]

    @property
    def class_count(self) -> int:
        return self.probabilities.shape[1]

    def to_json(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "seed": self.seed,
                "probabilities": self.probabilities.tolist()}


def make_partition(kind: str, node_count: int, class_count: int, seed: int = 0,
                   alpha: float | None = None) -> PartitionSpec:
    """Class-probability rows per node: iid, dirichlet(alpha) or two_labels."""
    if node_count < 1 or class_count < 2:
        raise PartitionError("need at least one node and two classes")
    if kind == "iid":
        probs = np.full((node_count, class_count), 1.0 / class_count)
    elif kind == "dirichlet":
        if alpha is None or not alpha > 0 or not np.isfinite(alpha):
            raise PartitionError(f"dirichlet partition needs alpha > 0, got {alpha}")
        rng = np.random.default_rng(seed)
        # gamma-ratio construction; resample rows that underflow to all zeros
        probs = np.empty((node_count, class_count))
        for i in range(node_count):
            g = rng.gamma(alpha, 1.0, size=class_count)
            while g.sum() == 0.0:
                g = rng.gamma(alpha, 1.0, size=class_count)
            probs[i] = g / g.sum()
    elif kind == "two_labels":
        probs = np.zeros((node_count, class_count))
        for i in range(node_count):
            probs[i, i % class_count] = 0.5
            probs[i, (i + 1) % class_count] = 0.5
    else:
        raise PartitionError(f"unknown partition kind {kind!r}")
    probs.setflags(write=False)
    return PartitionSpec(kind, seed, probs, alpha if kind == "dirichlet" else None)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """A source dataset with per-class index lists for class-conditional draws."""

    samples: Samples
    class_count: int
    by_class: tuple[np.ndarray, ...] = field(init=False)

    def __post_init__(self) -> None:
        idx = tuple(np.flatnonzero(self.samples.labels == c) for c in range(self.class_count))
        object.__setattr__(self, "by_class", idx)

    @property
    def feature_dim(self) -> int:
        return self.samples.features.shape[1]


def synthetic_dataset(n_per_class: int, class_count: int = 10, feature_dim: int = 32,
                      scale: float = 4.0, seed: int = 0) -> LabeledDataset:
    """Unit-variance Gaussian clusters centred on the scaled simplex vertices scale * e_c."""
    if feature_dim < class_count:
        raise PartitionError("feature_dim must be at least class_count")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(class_count), n_per_class)
    means = np.zeros((class_count, feature_dim))
    means[np.arange(class_count), np.arange(class_count)] = scale
    features = means[labels] + rng.standard_normal((labels.size, feature_dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(Samples(features[order], labels[order]), class_count)


def synthetic_split(train_per_class: int = 600, test_per_class: int = 100, class_count: int = 10,
                    feature_dim: int = 32, scale: float = 4.0, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    train = synthetic_dataset(train_per_class, class_count, feature_dim, scale, seed)
    test = synthetic_dataset(test_per_class, class_count, feature_dim, scale, seed + 1_000_003)
    return train, test


def draw_training_batch(spec: PartitionSpec, node_id: int, source: LabeledDataset, batch_size: int,
                        rng: np.random.Generator) -> Samples:
    """Sample classes from the node's row, then a uniform example of each class."""
    if batch_size < 1:
        raise PartitionError("batch_size must be at least 1")
    row = spec.probabilities[node_id]
    for c, p in enumerate(row):
        if p > 0 and source.by_class[c].size == 0:
            raise PartitionError(f"class {c} has probability {p} but no source samples")
    classes = rng.choice(spec.class_count, size=batch_size, p=row)
    picks = np.empty(batch_size, dtype=np.int64)
    for i, c in enumerate(classes):
        pool = source.by_class[c]
        picks[i] = pool[rng.integers(pool.size)]
    return source.samples[picks]


def poison_dataset_batch(feature_dim: int, batch_size: int, class_count: int,
                         rng: np.random.Generator) -> Samples:
    """Uniform [0, 1] features with uniformly random labels."""
    return Samples(rng.uniform(0.0, 1.0, size=(batch_size, feature_dim)),
                   rng.integers(0, class_count, size=batch_size))


def poison_model(architecture: "Architecture | str", rng: np.random.Generator) -> ModelParams:
    """Every weight uniform in [0, 0.001]."""
    arch = Architecture.parse(architecture)
    layers = [(name, rng.uniform(0.0, POISON_MAX_WEIGHT, size=int(np.prod(shape))))
              for name, shape in arch.layer_specs()]
    return ModelParams.from_layers(layers, arch.id)
