"""Networked node: TCP transport around one `ProtocolNode`.

One reader task per connection feeds a single inbox; only the consumer task
touches protocol state. Outbound frames go through bounded per-peer queues
and are dropped (and logged) when a peer falls behind.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .. import ledger
from ..crypto import generate_identity
from ..data import Behavior, draw_training_batch, make_partition, node_rng, poison_dataset_batch
from ..model import Architecture, Samples, evaluate, init_model
from ..protocol import Outbound, ProtocolNode, ProtocolParams, ReceiptedTransactionMsg, TransactionMsg, message_kind
from ..sim import DatasetConfig, PartitionConfig, load_datasets
from . import wire
from .profiler import Profiler, ProfilerReport

log = logging.getLogger(__name__)


class NodeConfig(BaseModel):
    """Settings for one deployed node. Durations are seconds."""

    model_config = ConfigDict(extra="forbid")

    name: str = "node"
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    peers: list[str] = Field(default_factory=list)
    identity_seed: int | None = None
    seed: int = 0
    node_index: int = 0
    partition_nodes: int = 1
    behavior: Behavior = Behavior.HONEST
    policy: str = "reputation_0.05"

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    hidden: int = 32
    shared_init_seed: int = 0
    lr: float = 0.1
    batch_size: int = 64
    test_batch_size: int = 100
    buffer_capacity: int = 4
    ttl: int = 1
    lifetime: float = 60.0
    transactions_per_block: int = 4
    confirmation_threshold: float = 0.8
    confirmation_timeout: float = 5.0
    receipt_wait: float = 5.0

    ingest_rate: float = 8.0
    ingest_interval: float = 1.0
    timer_interval: float = 0.1
    outbound_queue: int = 256
    reconnect_initial: float = 0.2
    reconnect_max: float = 5.0

    max_blocks: int | None = None
    max_seconds: float | None = None
    linger_seconds: float = 2.0
    out_dir: str | None = None

    api_host: str = "127.0.0.1"
    api_port: int | None = None

    @model_validator(mode="after")
    def _check(self) -> "NodeConfig":
        if self.ingest_rate <= 0 or self.ingest_interval <= 0 or self.timer_interval <= 0:
            raise ValueError("ingest_rate, ingest_interval and timer_interval must be positive")
        if not 0 <= self.node_index < self.partition_nodes:
            raise ValueError("node_index must be below partition_nodes")
        for p in self.peers:
            _split_endpoint(p)
        return self

    @classmethod
    def load(cls, path: str | Path) -> "NodeConfig":
        return cls.model_validate_json(Path(path).read_text())


def _split_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"peer endpoint {endpoint!r} is not host:port")
    return host or "127.0.0.1", int(port)


def _ms(seconds: float) -> int:
    return int(round(seconds * 1000))


@dataclass(eq=False)
class PeerConnection:
    address: bytes
    reader: asyncio.StreamReader
    writer: asyncio.StreamWriter
    dialer: bytes
    queue: asyncio.Queue
    tasks: list[asyncio.Task] = field(default_factory=list)
    dropped: int = 0

    def close(self) -> None:
        for t in self.tasks:
            t.cancel()
        self.writer.close()


class NetNode:
    def __init__(self, config: NodeConfig) -> None:
        self.config = config
        c = config
        seed = c.identity_seed if c.identity_seed is not None else c.seed * 1_000_003 + c.node_index
        self.identity = generate_identity(seed)
        self.train_set, test_set = load_datasets(c.dataset)
        classes = c.dataset.class_count
        self.architecture = Architecture(self.train_set.feature_dim, (c.hidden,), classes)
        self.partition = make_partition(c.partition.kind, c.partition_nodes, classes,
                                        c.seed if c.partition.seed is None else c.partition.seed,
                                        c.partition.alpha)
        self.genesis = ledger.make_genesis(
            self.architecture.descriptor, lr=c.lr, batch_size=c.batch_size, test_batch_size=c.test_batch_size,
            ttl=c.ttl, transactions_per_block=c.transactions_per_block, buffer_capacity=c.buffer_capacity,
            confirmation_threshold=c.confirmation_threshold,
        )
        self.data_rng = node_rng(c.seed, c.node_index, "ingest")
        # local accuracy is measured on a fixed slice of this node's own distribution
        self.local_test = draw_training_batch(self.partition, c.node_index, test_set, c.test_batch_size,
                                              node_rng(c.seed, c.node_index, "testslice"))
        self.profiler = Profiler()
        self.events: list[dict[str, Any]] = []
        params = ProtocolParams(
            lr=c.lr, batch_size=c.batch_size, buffer_capacity=c.buffer_capacity, ttl=c.ttl,
            lifetime=_ms(c.lifetime), transactions_per_block=c.transactions_per_block,
            confirmation_threshold=c.confirmation_threshold, confirmation_timeout=_ms(c.confirmation_timeout),
            receipt_wait=_ms(c.receipt_wait), policy=c.policy, ledger=True, single_node=True,
        )
        arch = self.architecture
        self.protocol = ProtocolNode(
            self.identity, c.behavior, init_model(arch, c.shared_init_seed), arch, self.genesis, params,
            lambda m: evaluate(m, arch, self.local_test), poison_rng=node_rng(c.seed, c.node_index, "poison"),
            event_log=self._record, profiler=self.profiler, name=c.name,
        )
        self.connections: dict[bytes, PeerConnection] = {}
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.server: asyncio.base_events.Server | None = None
        self.port: int | None = None
        self.started_at: float | None = None
        self.state: Literal["created", "running", "lingering", "stopped"] = "created"
        self._tasks: list[asyncio.Task] = []
        self._stop = asyncio.Event()
        self._ingesting = True
        self.samples_ingested = 0
        self.frames_dropped = 0

    # ------------------------------------------------------------ bookkeeping

    @property
    def address(self) -> bytes:
        return self.identity.address

    def now(self) -> int:
        return int(time.time() * 1000)

    def _record(self, event: dict[str, Any]) -> None:
        event["time_ms"] = self.now()
        self.events.append(event)
        log.debug("%s", event)

    def _hello(self) -> wire.Hello:
        return wire.Hello(self.address, self.identity.public_key, self.genesis.genesis_digest, self.port or 0)

    # ------------------------------------------------------------ lifecycle

    async def start(self) -> None:
        self.server = await asyncio.start_server(self._accept, self.config.listen_host, self.config.listen_port)
        self.port = self.server.sockets[0].getsockname()[1]
        self.started_at = time.monotonic()
        self.state = "running"
        spawn = asyncio.get_running_loop().create_task
        self._tasks = [spawn(self._consume()), spawn(self._ingest()), spawn(self._tick())]
        self._tasks += [spawn(self._dial(p)) for p in self.config.peers]
        log.info("%s listening on %s:%d as %s", self.config.name, self.config.listen_host, self.port,
                 self.identity.hex[:16])

    def request_stop(self) -> None:
        self._stop.set()

    def connect_to(self, endpoint: str) -> None:
        """Dial an extra peer after start."""
        self._tasks.append(asyncio.get_running_loop().create_task(self._dial(endpoint)))

    async def run(self) -> ProfilerReport:
        """Start, wait for a stop condition, linger for peers, then shut down."""
        if self.state == "created":
            await self.start()
        await self._wait_for_stop()
        self._ingesting = False
        self.state = "lingering"
        await asyncio.sleep(self.config.linger_seconds)
        return await self.shutdown()

    async def _wait_for_stop(self) -> None:
        c = self.config
        while not self._stop.is_set():
            if c.max_blocks is not None and len(self.protocol.chain) >= c.max_blocks:
                return
            if c.max_seconds is not None and time.monotonic() - self.started_at >= c.max_seconds:
                return
            if self.protocol.halted:
                return
            try:
                await asyncio.wait_for(self._stop.wait(), 0.05)
            except asyncio.TimeoutError:
                pass

    async def shutdown(self) -> ProfilerReport:
        self.state = "stopped"
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        for conn in list(self.connections.values()):
            conn.close()
        self.connections.clear()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        report = self.profiler.report()
        if self.config.out_dir:
            self.write_outputs(self.config.out_dir, report)
        return report

    def write_outputs(self, out_dir: str | Path, report: ProfilerReport | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ledger.save_chain(out / "chain", self.protocol.chain, self.genesis)
        with open(out / "events.jsonl", "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
        (report or self.profiler.report()).write(out / "profiler.json")
        return out

    # ------------------------------------------------------------ connections

    async def _dial(self, endpoint: str) -> None:
        host, port = _split_endpoint(endpoint)
        delay = self.config.reconnect_initial
        known: bytes | None = None
        while True:
            if known is not None and known in self.connections:
                await asyncio.sleep(self.config.reconnect_initial)
                continue
            try:
                reader, writer = await asyncio.open_connection(host, port)
            except OSError as exc:
                log.info("%s: connect to %s failed (%s); retrying in %.1fs", self.config.name, endpoint, exc, delay)
                await asyncio.sleep(delay)
                delay = min(delay * 2, self.config.reconnect_max)
                continue
            delay = self.config.reconnect_initial
            known = await self._handshake(reader, writer, dialed=True)
            if known is None:
                await asyncio.sleep(self.config.reconnect_initial)

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        await self._handshake(reader, writer, dialed=False)

    async def _handshake(self, reader, writer, *, dialed: bool) -> bytes | None:
        try:
            writer.write(wire.encode_message(self._hello()))
            await writer.drain()
            hello = wire.frame_message(await asyncio.wait_for(wire.read_frame(reader), 10))
        except (OSError, asyncio.IncompleteReadError, asyncio.TimeoutError, wire.FrameError) as exc:
            log.info("%s: handshake failed: %s", self.config.name, exc)
            writer.close()
            return None
        if not isinstance(hello, wire.Hello) or not hello.valid():
            self._record({"event": "drop", "kind": "hello", "cause": "invalid hello"})
            writer.close()
            return None
        if hello.genesis_digest != self.genesis.genesis_digest:
            self._record({"event": "drop", "kind": "hello", "cause": "genesis mismatch"})
            writer.close()
            return None
        if hello.address == self.address:
            writer.close()
            return None
        dialer = self.address if dialed else hello.address
        existing = self.connections.get(hello.address)
        if existing is not None:
            # a redial replaces a stale link; on a simultaneous dial the smaller address's link wins
            keep_new = existing.dialer == dialer or dialer == min(self.address, hello.address)
            if not keep_new:
                writer.close()
                return hello.address
            existing.close()
        conn = PeerConnection(hello.address, reader, writer, dialer, asyncio.Queue(self.config.outbound_queue))
        self.connections[hello.address] = conn
        spawn = asyncio.get_running_loop().create_task
        conn.tasks = [spawn(self._read_loop(conn)), spawn(self._write_loop(conn))]
        self.inbox.put_nowait(("peers",))
        self._record({"event": "peer_connected", "peer": hello.address.hex()[:16]})
        return hello.address

    def _disconnect(self, conn: PeerConnection, cause: str) -> None:
        if self.connections.get(conn.address) is conn:
            del self.connections[conn.address]
            self.inbox.put_nowait(("peers",))
            self._record({"event": "peer_disconnected", "peer": conn.address.hex()[:16], "cause": cause})
        conn.close()

    async def _read_loop(self, conn: PeerConnection) -> None:
        try:
            while True:
                frame = await wire.read_frame(conn.reader)
                try:
                    msg = wire.frame_message(frame)
                except wire.FrameError as exc:
                    self._record({"event": "drop", "kind": f"tag_0x{frame.message_type:02x}", "cause": str(exc)})
                    continue
                if isinstance(msg, wire.Hello):
                    continue
                self.inbox.put_nowait(("msg", conn.address, msg))
        except (asyncio.IncompleteReadError, ConnectionError, OSError) as exc:
            self._disconnect(conn, f"read closed: {type(exc).__name__}")
        except wire.FrameError as exc:
            self._disconnect(conn, str(exc))

    async def _write_loop(self, conn: PeerConnection) -> None:
        try:
            while True:
                data = await conn.queue.get()
                conn.writer.write(data)
                await conn.writer.drain()
        except (ConnectionError, OSError) as exc:
            self._disconnect(conn, f"write failed: {type(exc).__name__}")

    def _send(self, outs: list[Outbound]) -> None:
        for out in outs:
            if isinstance(out.message, TransactionMsg):
                section = "broadcast_transaction"
            elif isinstance(out.message, ReceiptedTransactionMsg):
                section = "broadcast_generated_transaction"
            else:
                section = "blockchain_overhead_block"
            with self.profiler.section(section):
                data = wire.encode_message(out.message)
                for dest in out.to:
                    conn = self.connections.get(dest)
                    if conn is None:
                        continue
                    try:
                        conn.queue.put_nowait(data)
                    except asyncio.QueueFull:
                        conn.dropped += 1
                        self.frames_dropped += 1
                        self._record({"event": "drop", "kind": message_kind(out.message),
                                      "cause": "outbound queue full", "peer": dest.hex()[:16]})

    # ------------------------------------------------------------ protocol loop

    async def _consume(self) -> None:
        while True:
            item = await self.inbox.get()
            kind = item[0]
            now = self.now()
            try:
                if kind == "msg":
                    self._send(self.protocol.on_message(item[2], item[1], now))
                elif kind == "data":
                    self._send(self.protocol.on_data(item[1], now))
                elif kind == "timer":
                    self._send(self.protocol.on_timer(now))
                elif kind == "peers":
                    self.protocol.peers = set(self.connections)
            except Exception:
                log.exception("%s: handler failed on %s", self.config.name, kind)

    async def _ingest(self) -> None:
        c = self.config
        carry = 0.0
        while True:
            await asyncio.sleep(c.ingest_interval)
            if not self._ingesting:
                continue
            carry += c.ingest_rate * c.ingest_interval
            n, carry = int(carry), carry - int(carry)
            if n == 0:
                continue
            if self.protocol.behavior is Behavior.DATASET_POISONER:
                batch = poison_dataset_batch(self.train_set.feature_dim, n, c.dataset.class_count, self.data_rng)
            else:
                batch = draw_training_batch(self.partition, c.node_index, self.train_set, n, self.data_rng)
            self.samples_ingested += n
            self.inbox.put_nowait(("data", batch))

    async def _tick(self) -> None:
        while True:
            await asyncio.sleep(self.config.timer_interval)
            self.inbox.put_nowait(("timer",))

    # ------------------------------------------------------------ introspection

    def status(self) -> dict[str, Any]:
        p = self.protocol
        return {
            "name": self.config.name,
            "address": self.identity.hex,
            "state": self.state,
            "behavior": p.behavior.value,
            "listen_port": self.port,
            "peers": sorted(a.hex() for a in self.connections),
            "chain_height": len(p.chain),
            "pending_transactions": len(p.pending_transactions),
            "transactions_sent": p.transactions_sent,
            "trainings": p.trainings,
            "model_updates": len(p.update_log),
            "self_accuracy": p.self_accuracy,
            "samples_ingested": self.samples_ingested,
            "frames_dropped": self.frames_dropped,
            "unfinalized_blocks": p.unfinalized_blocks,
            "halted": p.halted,
            "uptime_seconds": time.monotonic() - self.started_at if self.started_at else 0.0,
        }

    def ingest(self, features, labels) -> int:
        """Queue externally supplied samples for training."""
        batch = Samples(features, labels)
        self.samples_ingested += len(batch)
        self.inbox.put_nowait(("data", batch))
        return len(batch)
