"""Deterministic tick simulator running many protocol nodes with zero-delay delivery."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import ledger
from .crypto import generate_identity
from .data import (
    Behavior,
    LabeledDataset,
    PartitionSpec,
    draw_training_batch,
    make_partition,
    node_rng,
    poison_dataset_batch,
    synthetic_split,
)
from .model import Architecture, Samples, evaluate, init_model, model_difference
from .protocol import Outbound, ProtocolNode, ProtocolParams, message_kind

log = logging.getLogger(__name__)


class SimConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

class PartitionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["iid", "dirichlet", "two_labels"] = "iid"
    alpha: float | None = None
    seed: int | None = None


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["synthetic", "mnist"] = "synthetic"
    train_per_class: int = 600
    test_per_class: int = 100
    feature_dim: int = 32
    class_count: int = 10
    scale: float = 4.0
    seed: int = 0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


class TopologyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    active_connections: int = 2
    seed: int | None = None
    fully_connected: bool = False
    adjacency: list[list[int]] | None = None


class LedgerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    enabled: bool = False
    transactions_per_block: int = 4
    confirmation_threshold: float = 0.8
    confirmation_timeout: int = 5
    receipt_wait: int = 2


class SimConfig(BaseModel):
    """One simulation run; every field can be set from the JSON config file."""

    model_config = ConfigDict(extra="forbid")

    node_count: int = 10
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    behaviors: dict[int, Behavior] = Field(default_factory=dict)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    policy: str = "half_fedavg"
    buffer_capacity: int = 4
    batch_size: int = 64
    test_batch_size: int = 100
    injection_low: int = 8
    injection_high: int = 12
    ttl: int = 1
    lifetime: int = 100
    total_ticks: int = 4000
    seed: int = 0
    repetitions: int = 1
    metrics_interval: int = 10
    lr: float = 0.1
    hidden: int = 32
    same_init: bool = True
    loss: dict[str, float] = Field(default_factory=dict)
    ledger: LedgerConfig = Field(default_factory=LedgerConfig)
    event_log: bool = True

    @model_validator(mode="after")
    def _check(self) -> "SimConfig":
        if self.node_count < 2:
            raise ValueError("node_count must be at least 2")
        if not 1 <= self.injection_low <= self.injection_high:
            raise ValueError("injection bounds must satisfy 1 <= low <= high")
        if self.metrics_interval < 1 or self.total_ticks < 0 or self.repetitions < 1:
            raise ValueError("metrics_interval, total_ticks and repetitions must be positive")
        for node in self.behaviors:
            if not 0 <= node < self.node_count:
                raise ValueError(f"behavior assigned to unknown node {node}")
        for kind, p in self.loss.items():
            if kind not in {"transaction", "receipted_transaction", "draft_block", "confirmation"}:
                raise ValueError(f"unknown message kind {kind!r} in loss")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"loss probability {p} outside [0, 1]")
        if self.partition.kind == "dirichlet" and not (self.partition.alpha or 0) > 0:
            raise ValueError("dirichlet partition needs alpha > 0")
        return self

    def behavior_of(self, node: int) -> Behavior:
        return self.behaviors.get(node, Behavior.HONEST)

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        return cls.model_validate_json(Path(path).read_text())


# ---------------------------------------------------------------- topology

def _connected(adj: Sequence[set[int]]) -> bool:
    seen, stack = {0}, [0]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(adj)


def generate_topology(node_count: int, active_connections: int, seed: int,
                      max_attempts: int = 10_000) -> list[list[int]]:
    """Each node dials `active_connections` random others; edges are undirected.

    Disconnected draws are rejected and resampled.
    """
    if node_count < 2 or not 1 <= active_connections < node_count:
        raise SimConfigError(f"cannot build topology with {node_count} nodes and "
                             f"{active_connections} active connections")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        adj: list[set[int]] = [set() for _ in range(node_count)]
        for i in range(node_count):
            others = [j for j in range(node_count) if j != i]
            for j in rng.choice(others, size=active_connections, replace=False):
                adj[i].add(int(j))
                adj[int(j)].add(i)
        if _connected(adj):
            return [sorted(a) for a in adj]
    raise SimConfigError("could not draw a connected topology")


def fully_connected(node_count: int) -> list[list[int]]:
    return [[j for j in range(node_count) if j != i] for i in range(node_count)]


def check_topology(adjacency: Sequence[Sequence[int]], node_count: int) -> None:
    if len(adjacency) != node_count:
        raise SimConfigError("adjacency list length differs from node_count")
    for i, peers in enumerate(adjacency):
        if not peers:
            raise SimConfigError(f"node {i} has no peers")
        for j in peers:
            if not 0 <= j < node_count or j == i:
                raise SimConfigError(f"node {i} has invalid peer {j}")
            if i not in adjacency[j]:
                raise SimConfigError(f"edge {i}-{j} is not symmetric")


def resolve_topology(config: SimConfig) -> list[list[int]]:
    t = config.topology
    if t.adjacency is not None:
        adj = [sorted(set(p)) for p in t.adjacency]
    elif t.fully_connected:
        adj = fully_connected(config.node_count)
    else:
        seed = config.seed if t.seed is None else t.seed
        adj = generate_topology(config.node_count, t.active_connections, seed)
    check_topology(adj, config.node_count)
    return adj


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsFrame:
    tick: int
    accuracies: list[float]
    difference: np.ndarray


def collect_metrics(nodes: Sequence[ProtocolNode], test_set: Samples, tick: int) -> MetricsFrame:
    if len(nodes) < 2:
        raise SimConfigError("metrics need at least two nodes")
    arch = nodes[0].architecture
    accs = [evaluate(n.model, arch, test_set) for n in nodes]
    return MetricsFrame(tick, accs, model_difference([n.model for n in nodes]))


def metrics_csv(frames: Sequence[MetricsFrame], layer_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tick", "node_id", "accuracy", *[f"difference_{n}" for n in layer_names]])
    for f in frames:
        diff = [repr(float(d)) for d in f.difference]
        for i, acc in enumerate(f.accuracies):
            w.writerow([f.tick, i, repr(float(acc)), *diff])
    return buf.getvalue()


# ---------------------------------------------------------------- running

@dataclass
class SimRun:
    config: SimConfig
    topology: list[list[int]]
    partition: PartitionSpec
    nodes: list[ProtocolNode]
    frames: list[MetricsFrame]
    events: list[dict[str, Any]]
    reputation_rows: list[tuple[int, int, int, float]]
    genesis: ledger.GenesisBlock
    delivered: int = 0
    lost: int = 0

    @property
    def layer_names(self) -> list[str]:
        return list(self.nodes[0].model.names)

    def accuracy_series(self, node: int) -> list[tuple[int, float]]:
        return [(f.tick, f.accuracies[node]) for f in self.frames]

    def final_accuracies(self) -> list[float]:
        return list(self.frames[-1].accuracies)

    def metrics_csv(self) -> str:
        return metrics_csv(self.frames, self.layer_names)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        with open(out / "events.jsonl", "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
        echo = {
            "config": json.loads(self.config.model_dump_json()),
            "topology": self.topology,
            "partition": self.partition.to_json(),
            "genesis": self.genesis.to_json(),
        }
        (out / "config-echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "node_id", "peer_id", "reputation"])
        w.writerows(self.reputation_rows)
        (out / "reputation.csv").write_text(buf.getvalue())
        if self.config.ledger.enabled:
            for i, node in enumerate(self.nodes):
                ledger.save_chain(out / "chains" / f"node_{i}", node.chain, self.genesis)
        return out


def load_datasets(cfg: DatasetConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.kind == "synthetic":
        return synthetic_split(cfg.train_per_class, cfg.test_per_class, cfg.class_count,
                               cfg.feature_dim, cfg.scale, cfg.seed)
    from .mnist import load_mnist

    paths = [cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels]
    if not all(paths):
        raise SimConfigError("mnist dataset needs train/test image and label paths")
    train = load_mnist(cfg.train_images, cfg.train_labels)
    test = load_mnist(cfg.test_images, cfg.test_labels)
    return LabeledDataset(train, cfg.class_count), LabeledDataset(test, cfg.class_count)


def _accuracy_fn(arch: Architecture, samples: Samples):
    return lambda model: evaluate(model, arch, samples)


def run_simulation(config: SimConfig, *, datasets: tuple[LabeledDataset, LabeledDataset] | None = None,
                   out_dir: str | Path | None = None) -> SimRun:
    """Run ticks 0..total_ticks; a metrics frame closes every metrics_interval-th tick after 0.

    Identical configs give byte-identical artifacts.
    """
    topology = resolve_topology(config)
    train, test = datasets or load_datasets(config.dataset)
    classes = config.dataset.class_count
    arch = Architecture(train.feature_dim, (config.hidden,), classes)
    pseed = config.seed if config.partition.seed is None else config.partition.seed
    partition = make_partition(config.partition.kind, config.node_count, classes, pseed, config.partition.alpha)

    lcfg = config.ledger
    params = ProtocolParams(
        lr=config.lr, batch_size=config.batch_size, buffer_capacity=config.buffer_capacity,
        ttl=config.ttl, lifetime=config.lifetime, transactions_per_block=lcfg.transactions_per_block,
        confirmation_threshold=lcfg.confirmation_threshold, confirmation_timeout=lcfg.confirmation_timeout,
        receipt_wait=lcfg.receipt_wait, policy=config.policy, ledger=lcfg.enabled,
    )
    genesis = ledger.make_genesis(
        arch.descriptor, lr=config.lr, batch_size=config.batch_size, test_batch_size=config.test_batch_size,
        ttl=config.ttl, transactions_per_block=lcfg.transactions_per_block,
        buffer_capacity=config.buffer_capacity, confirmation_threshold=lcfg.confirmation_threshold,
    )

    events: list[dict[str, Any]] = []
    tick = 0

    def recorder(ev: dict[str, Any]) -> None:
        ev["tick"] = tick
        events.append(ev)

    nodes: list[ProtocolNode] = []
    for i in range(config.node_count):
        identity = generate_identity(config.seed * 1_000_003 + i)
        init_seed = config.seed if config.same_init else config.seed * 7919 + i
        slice_rng = node_rng(config.seed, i, "testslice")
        k = min(config.test_batch_size, len(test.samples))
        local_test = test.samples[slice_rng.choice(len(test.samples), size=k, replace=False)]
        node = ProtocolNode(
            identity, config.behavior_of(i), init_model(arch, init_seed), arch, genesis, params,
            _accuracy_fn(arch, local_test), poison_rng=node_rng(config.seed, i, "poison"),
            event_log=recorder if config.event_log else None, name=str(i),
        )
        nodes.append(node)
    index_of = {n.address: i for i, n in enumerate(nodes)}
    for i, peers in enumerate(topology):
        nodes[i].peers = {nodes[j].address for j in peers}

    data_rngs = [node_rng(config.seed, i, "data") for i in range(config.node_count)]
    sched_rngs = [node_rng(config.seed, i, "schedule") for i in range(config.node_count)]
    net_rng = node_rng(config.seed, 0, "network")
    next_train = [int(r.integers(config.injection_low, config.injection_high + 1)) for r in sched_rngs]

    run = SimRun(config, topology, partition, nodes, [], events, [], genesis)
    queue: deque[tuple[int, Outbound]] = deque()

    def deliver(src: int, outs: list[Outbound]) -> None:
        queue.extend((src, o) for o in outs)
        while queue:
            s, out = queue.popleft()
            kind = message_kind(out.message)
            p = config.loss.get(kind, 0.0)
            for dest in out.to:
                if p > 0.0 and net_rng.random() < p:
                    run.lost += 1
                    if config.event_log:
                        events.append({"event": "lost", "tick": tick, "node": str(index_of[dest]),
                                       "kind": kind, "sender": str(s)})
                    continue
                d = index_of[dest]
                run.delivered += 1
                queue.extend((d, o) for o in nodes[d].on_message(out.message, nodes[s].address, tick))

    test_set = test.samples
    for tick in range(config.total_ticks + 1):
        for i, node in enumerate(nodes):
            if next_train[i] != tick:
                continue
            next_train[i] = tick + int(sched_rngs[i].integers(config.injection_low, config.injection_high + 1))
            if not node.behavior.trains:
                continue
            if node.behavior is Behavior.DATASET_POISONER:
                batch = poison_dataset_batch(train.feature_dim, config.batch_size, classes, data_rngs[i])
            else:
                batch = draw_training_batch(partition, i, train, config.batch_size, data_rngs[i])
            deliver(i, node.on_data(batch, tick))
        if lcfg.enabled:
            for i, node in enumerate(nodes):
                deliver(i, node.on_timer(tick))
        if tick > 0 and tick % config.metrics_interval == 0:
            run.frames.append(collect_metrics(nodes, test_set, tick))
            for i, node in enumerate(nodes):
                for addr in sorted(node.reputation, key=lambda a: index_of.get(a, -1)):
                    if addr in index_of:
                        run.reputation_rows.append((tick, i, index_of[addr], node.reputation[addr]))

    if out_dir is not None:
        run.write(out_dir)
    return run


def mean_metrics_csv(runs: Sequence[SimRun]) -> str:
    """Elementwise mean of the metrics series over repetitions."""
    frames = []
    for k, f in enumerate(runs[0].frames):
        accs = np.mean([r.frames[k].accuracies for r in runs], axis=0)
        diff = np.mean([r.frames[k].difference for r in runs], axis=0)
        frames.append(MetricsFrame(f.tick, accs.tolist(), diff))
    return metrics_csv(frames, runs[0].layer_names)


def run_repetitions(config: SimConfig, out_dir: str | Path | None = None) -> list[SimRun]:
    """`repetitions` runs with consecutive seeds; the topology stays fixed."""
    topo_seed = config.seed if config.topology.seed is None else config.topology.seed
    base_pseed = config.seed if config.partition.seed is None else config.partition.seed
    runs = []
    datasets = load_datasets(config.dataset)
    for r in range(config.repetitions):
        cfg = config.model_copy(deep=True, update={"seed": config.seed + r})
        cfg.topology.seed = topo_seed
        cfg.partition.seed = base_pseed + r
        target = None
        if out_dir is not None:
            target = Path(out_dir) / f"rep_{r:03d}" if config.repetitions > 1 else Path(out_dir)
        runs.append(run_simulation(cfg, datasets=datasets, out_dir=target))
    if out_dir is not None and config.repetitions > 1:
        (Path(out_dir) / "mean_metrics.csv").write_text(mean_metrics_csv(runs))
    return runs


# ---------------------------------------------------------------- update/train ratio

def ticks_to_accuracy(series: Sequence[tuple[int, float]], target: float) -> float:
    for tick, acc in series:
        if acc >= target:
            return tick
    return math.inf


@dataclass
class RatioResult:
    buffer_sizes: list[int]
    runs: list[SimRun] = field(default_factory=list)
    target: float = 0.8

    def observer_series(self) -> dict[int, list[tuple[int, float]]]:
        return {b: r.accuracy_series(0) for b, r in zip(self.buffer_sizes, self.runs)}

    def ticks_to_target(self) -> dict[int, float]:
        return {b: ticks_to_accuracy(s, self.target) for b, s in self.observer_series().items()}

    def summary(self) -> dict:
        return {
            "buffer_sizes": self.buffer_sizes,
            "target_accuracy": self.target,
            # null where the target was never reached
            "observer_ticks_to_target": {str(b): (None if math.isinf(t) else t)
                                         for b, t in self.ticks_to_target().items()},
            "observer_final_accuracy": {str(b): r.final_accuracies()[0]
                                        for b, r in zip(self.buffer_sizes, self.runs)},
        }


def ratio_config(config: SimConfig, buffer_size: int) -> SimConfig:
    """Fully connected, IID, node 0 observer, reputation-0.05, given buffer size."""
    cfg = config.model_copy(deep=True)
    cfg.topology = TopologyConfig(fully_connected=True)
    cfg.behaviors = {0: Behavior.OBSERVER}
    cfg.partition = PartitionConfig(kind="iid")
    cfg.policy = "reputation_0.05"
    cfg.buffer_capacity = buffer_size
    return cfg


def run_ratio_experiment(config: SimConfig, buffer_sizes: Sequence[int], target: float = 0.8,
                         out_dir: str | Path | None = None) -> RatioResult:
    result = RatioResult(list(buffer_sizes), target=target)
    datasets = load_datasets(config.dataset)
    for b in buffer_sizes:
        target_dir = Path(out_dir) / f"buffer_{b}" if out_dir is not None else None
        result.runs.append(run_simulation(ratio_config(config, b), datasets=datasets, out_dir=target_dir))
    if out_dir is not None:
        series = result.observer_series()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", *[f"observer_accuracy_buffer_{b}" for b in result.buffer_sizes]])
        for k, (tick, _) in enumerate(series[result.buffer_sizes[0]]):
            w.writerow([tick, *[repr(series[b][k][1]) for b in result.buffer_sizes]])
        (Path(out_dir) / "ratio.csv").write_text(buf.getvalue())
        (Path(out_dir) / "ratio-summary.json").write_text(json.dumps(result.summary(), indent=2))
    return result
