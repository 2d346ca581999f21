"""Per-node protocol state machine.

A `ProtocolNode` consumes one event at a time (local data, an incoming
message, a timer tick) and returns the messages it wants sent. It never
waits on a peer, so the same handlers drive the tick simulator and the
networked node.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator, Union

import numpy as np

from . import ledger
from .crypto import NodeIdentity
from .data import Behavior, poison_model
from .ledger import Block, Confirmation, GenesisBlock, Receipt, Transaction
from .model import (
    Architecture,
    BufferEntry,
    FedAvgBuffer,
    ModelParams,
    Samples,
    TrainingDiverged,
    half_fedavg,
    train_step,
    weighted_fedavg,
)
from .reputation import ReputationPolicy, ReputationTable, get_policy, reputations_all_zero

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransactionMsg:
    transaction: Transaction


@dataclass(frozen=True)
class ReceiptedTransactionMsg:
    transaction: Transaction


@dataclass(frozen=True)
class DraftBlockMsg:
    block: Block


@dataclass(frozen=True)
class ConfirmationMsg:
    confirmation: Confirmation


Message = Union[TransactionMsg, ReceiptedTransactionMsg, DraftBlockMsg, ConfirmationMsg]

MESSAGE_KIND = {
    TransactionMsg: "transaction",
    ReceiptedTransactionMsg: "receipted_transaction",
    DraftBlockMsg: "draft_block",
    ConfirmationMsg: "confirmation",
}


def message_kind(msg: Message) -> str:
    return MESSAGE_KIND[type(msg)]


@dataclass(frozen=True)
class Outbound:
    to: tuple[bytes, ...]
    message: Message


@dataclass
class ProtocolParams:
    lr: float = 0.1
    batch_size: int = 64
    buffer_capacity: int = 4
    ttl: int = 1
    lifetime: int = 100
    transactions_per_block: int = 4
    confirmation_threshold: float = 0.8
    confirmation_timeout: int = 5
    receipt_wait: int = 2
    policy: str = "half_fedavg"
    ledger: bool = True
    # a node without peers receipts and confirms its own transactions
    single_node: bool = False


class NullProfiler:
    @contextlib.contextmanager
    def section(self, name: str) -> Iterator[None]:
        yield


@dataclass
class UpdateRecord:
    time: int
    observations: list[tuple[bytes, float]]
    penalized: bytes | None
    reputation: dict[bytes, float]
    accuracy: float
    fallback: bool


@dataclass
class _Outstanding:
    draft: Block
    expected: set[bytes]
    sent_at: int
    confirmations: dict[bytes, Confirmation] = field(default_factory=dict)
    retried: bool = False


class NodeHalted(RuntimeError):
    pass


class ProtocolNode:
    def __init__(
        self,
        identity: NodeIdentity,
        behavior: Behavior,
        model: ModelParams,
        architecture: Architecture,
        genesis: GenesisBlock,
        params: ProtocolParams,
        accuracy_fn: Callable[[ModelParams], float],
        *,
        poison_rng: np.random.Generator | None = None,
        policy: ReputationPolicy | None = None,
        event_log: Callable[[dict[str, Any]], None] | None = None,
        profiler: Any = None,
        name: str | None = None,
    ) -> None:
        self.identity = identity
        self.behavior = Behavior(behavior)
        self.model = model
        self.architecture = architecture
        self.genesis = genesis
        self.genesis_digest = genesis.genesis_digest
        self.params = params
        self.accuracy_fn = accuracy_fn
        self.poison_rng = poison_rng if poison_rng is not None else np.random.default_rng(0)
        self.policy = policy or get_policy(params.policy)
        self.event_log = event_log
        self.profiler = profiler or NullProfiler()
        self.name = name or identity.hex[:8]

        self.data_queue: Samples = Samples.empty(architecture.input_dim)
        self.fedavg_buffer = FedAvgBuffer(params.buffer_capacity)
        self.reputation = ReputationTable()
        self.pending_transactions: dict[bytes, Transaction] = {}
        self.chain: list[Block] = []
        self.seen_digests: set[bytes] = set()
        self.peers: set[bytes] = set()

        self.foreign_receipts: dict[bytes, dict[bytes, Receipt]] = {}
        self.confirmed_drafts: set[bytes] = set()
        self.sent_confirmations: dict[bytes, Confirmation] = {}
        self.outstanding: _Outstanding | None = None
        self.update_log: list[UpdateRecord] = []
        self.transactions_sent = 0
        self.trainings = 0
        self.unfinalized_blocks = 0
        self.halted: str | None = None
        self.self_accuracy: float | None = None

    # ------------------------------------------------------------ helpers

    @property
    def address(self) -> bytes:
        return self.identity.address

    @property
    def prev_final_digest(self) -> bytes:
        return self.chain[-1].final_digest if self.chain else self.genesis_digest

    def _log(self, event: str, **fields: Any) -> None:
        if self.event_log is not None:
            self.event_log({"event": event, "node": self.name, **fields})

    def _drop(self, msg: Message, sender: bytes | None, cause: str) -> list[Outbound]:
        self._log("drop", kind=message_kind(msg), sender=sender.hex()[:16] if sender else None, cause=cause)
        return []

    def _broadcast(self, msg: Message) -> list[Outbound]:
        if not self.peers:
            return []
        to = tuple(sorted(self.peers))
        self._log("send", kind=message_kind(msg), to=len(to))
        return [Outbound(to, msg)]

    def _send(self, dest: bytes, msg: Message) -> list[Outbound]:
        self._log("send", kind=message_kind(msg), to=1)
        return [Outbound((dest,), msg)]

    # ------------------------------------------------------------ data / training

    def on_data(self, samples: Samples, now: int) -> list[Outbound]:
        if self.halted:
            return []
        if not self.behavior.trains:
            return []
        self.data_queue = Samples.concat([self.data_queue, samples])
        out: list[Outbound] = []
        b = self.params.batch_size
        while len(self.data_queue) >= b:
            batch, self.data_queue = self.data_queue[:b], self.data_queue[b:]
            try:
                with self.profiler.section("measure_accuracy"):
                    self.model = train_step(self.model, self.architecture, batch, self.params.lr)
                    self.trainings += 1
            except TrainingDiverged as exc:
                self.halted = str(exc)
                self._log("halt", cause=str(exc))
                return out
            out += self._emit_transaction(now)
        out += self.maybe_generate_block(now)
        return out

    def _emit_transaction(self, now: int) -> list[Outbound]:
        if not self.behavior.broadcasts:
            return []
        shared = self.model
        if self.behavior is Behavior.MODEL_POISONER:
            shared = poison_model(self.architecture, self.poison_rng)
        with self.profiler.section("blockchain_overhead_tx"):
            tx = ledger.create_transaction(self.identity, shared, self.params.ttl, now,
                                           self.params.lifetime, sign=self.params.ledger)
            self.seen_digests.add(tx.digest)
            if self.params.ledger:
                if self.params.single_node and not self.peers:
                    acc = self.accuracy_fn(shared)
                    tx = tx.with_receipt(ledger.create_receipt(self.identity, tx, acc, now))
                self.pending_transactions[tx.digest] = tx
        self.transactions_sent += 1
        self._log("transaction", digest=tx.digest.hex()[:16])
        return self._broadcast(TransactionMsg(tx))

    # ------------------------------------------------------------ incoming messages

    def on_message(self, msg: Message, sender: bytes | None, now: int) -> list[Outbound]:
        if self.halted:
            return []
        self._log("receive", kind=message_kind(msg), sender=sender.hex()[:16] if sender else None)
        if isinstance(msg, (TransactionMsg, ReceiptedTransactionMsg)):
            return self.on_transaction(msg, sender, now)
        if isinstance(msg, DraftBlockMsg):
            return self.on_draft_block(msg, sender, now)
        if isinstance(msg, ConfirmationMsg):
            return self.on_confirmation(msg, sender, now)
        raise TypeError(f"unknown message {type(msg).__name__}")

    def on_transaction(self, msg: TransactionMsg | ReceiptedTransactionMsg, sender: bytes | None,
                       now: int) -> list[Outbound]:
        tx = msg.transaction
        if tx.digest in self.seen_digests:
            if tx.generator == self.address:
                return self._collect_receipts(tx, now)
            self._store_foreign(tx)
            return self._drop(msg, sender, "duplicate")
        if now > tx.expire_time:
            return self._drop(msg, sender, "expired")
        if not tx.ml_model.same_shape(self.model):
            return self._drop(msg, sender, "architecture mismatch")
        if self.params.ledger:
            with self.profiler.section("blockchain_overhead_receive"):
                if not ledger.verify_transaction(tx):
                    return self._drop(msg, sender, "bad transaction signature")
                if not all(rc.verify() and rc.transaction_digest == tx.digest for rc in tx.receipts):
                    return self._drop(msg, sender, "bad receipt signature")
        try:
            ledger.compute_received_at_ttl(tx)
        except ledger.TTLExhausted:
            self._store_foreign(tx)
            return self._drop(msg, sender, "ttl exhausted")

        self.seen_digests.add(tx.digest)
        with self.profiler.section("calculate_accuracy"):
            accuracy = self.accuracy_fn(tx.ml_model)
        with self.profiler.section("blockchain_overhead_receive"):
            receipt = ledger.create_receipt(self.identity, tx, accuracy, now, sign=self.params.ledger)
            forwarded = tx.with_receipt(receipt)
        self._store_foreign(forwarded)
        self._log("receipt", digest=tx.digest.hex()[:16], generator=tx.generator.hex()[:16],
                  accuracy=accuracy, received_at_ttl=receipt.received_at_ttl)
        out = self._broadcast(ReceiptedTransactionMsg(forwarded))

        self.fedavg_buffer.add(BufferEntry(tx.generator, tx.ml_model, accuracy, tx.create_time))
        if self.fedavg_buffer.full:
            self.update_model(now)
        return out

    def _store_foreign(self, tx: Transaction) -> None:
        if not tx.receipts:
            return
        slot = self.foreign_receipts.setdefault(tx.digest, {})
        for rc in tx.receipts:
            slot.setdefault(rc.creator, rc)

    def _collect_receipts(self, tx: Transaction, now: int) -> list[Outbound]:
        mine = self.pending_transactions.get(tx.digest)
        if mine is None:
            return []
        have = {rc.creator for rc in mine.receipts}
        added = False
        for rc in tx.receipts:
            if rc.creator in have or rc.creator == self.address or rc.transaction_digest != tx.digest:
                continue
            if self.params.ledger and not rc.verify():
                self._log("drop", kind="receipt", cause="bad receipt signature")
                continue
            mine = mine.with_receipt(rc)
            have.add(rc.creator)
            added = True
        if added:
            self.pending_transactions[tx.digest] = mine
            return self.maybe_generate_block(now)
        return []

    # ------------------------------------------------------------ model update

    def update_model(self, now: int) -> None:
        """Merge the full buffer into the local model and clear the buffer."""
        entries = self.fedavg_buffer.entries
        observations = [(e.generator, e.accuracy) for e in entries]
        penalized = None
        fallback = False
        with self.profiler.section("calculate_self_accuracy"):
            if self.policy.weighted:
                before = self.reputation
                self.reputation = self.policy.update(self.reputation, observations)
                changed = [a for a in self.reputation if self.reputation[a] != before[a]]
                penalized = changed[0] if changed else None
                fallback = reputations_all_zero(self.reputation, [g for g, _ in observations])
                self.model = weighted_fedavg(self.fedavg_buffer, self.reputation, self.model)
            else:
                self.model = half_fedavg(self.fedavg_buffer, self.model)
            self.self_accuracy = self.accuracy_fn(self.model)
        with self.profiler.section("blockchain_overhead_update"):
            self.fedavg_buffer.clear()
        record = UpdateRecord(now, observations, penalized,
                              {a: self.reputation[a] for a in self.reputation},
                              self.self_accuracy, fallback)
        self.update_log.append(record)
        self._log("model_update", accuracy=self.self_accuracy, fallback=fallback,
                  penalized=penalized.hex()[:16] if penalized else None)

    # ------------------------------------------------------------ blocks

    def _ready(self, tx: Transaction, now: int) -> bool:
        if not tx.receipts:
            return False
        creators = {rc.creator for rc in tx.receipts}
        return self.peers <= creators or now - tx.create_time >= self.params.receipt_wait

    def maybe_generate_block(self, now: int) -> list[Outbound]:
        if not self.params.ledger or self.outstanding is not None:
            return []
        for digest, tx in list(self.pending_transactions.items()):
            if not tx.receipts and now > tx.expire_time:
                del self.pending_transactions[digest]
                self._log("drop", kind="transaction", cause="expired without receipts")
        n = self.params.transactions_per_block
        ready = [tx for tx in self.pending_transactions.values() if self._ready(tx, now)][:n]
        if len(ready) < n:
            return []
        with self.profiler.section("blockchain_overhead_block"):
            draft = ledger.draft_block(self.identity, ready, self.prev_final_digest,
                                       self.genesis_digest, height=len(self.chain))
            for tx in ready:
                del self.pending_transactions[tx.digest]
            expected = {rc.creator for rc in draft.receipts()} - {self.address}
        self.outstanding = _Outstanding(draft, expected, now)
        self._log("draft_block", height=draft.height, transactions=len(ready), receipts=len(draft.receipts()))
        if not expected:
            # every receipt is our own (lone node): confirm them ourselves
            with self.profiler.section("blockchain_overhead_block"):
                own = ledger.confirm_block(self.identity, draft, self.confirmed_drafts)
            self.outstanding.confirmations[self.address] = own
            return self._try_finalize(now, timed_out=True)
        return self._broadcast(DraftBlockMsg(draft))

    def on_draft_block(self, msg: DraftBlockMsg, sender: bytes | None, now: int) -> list[Outbound]:
        draft = msg.block
        if draft.genesis_digest != self.genesis_digest:
            return self._drop(msg, sender, "genesis mismatch")
        with self.profiler.section("blockchain_overhead_block"):
            if not ledger.verify_draft(draft):
                return self._drop(msg, sender, "bad draft signature")
            dest = draft.generator
            if draft.draft_digest in self.sent_confirmations:
                # a retried draft gets the same confirmation again, never a second one
                return self._send(dest, ConfirmationMsg(self.sent_confirmations[draft.draft_digest]))
            try:
                conf = ledger.confirm_block(self.identity, draft, self.confirmed_drafts)
            except ledger.NothingToConfirm:
                self._log("drop", kind="draft_block", cause="nothing to confirm")
                return []
            except ledger.LedgerError as exc:
                return self._drop(msg, sender, str(exc))
        self.sent_confirmations[draft.draft_digest] = conf
        return self._send(dest, ConfirmationMsg(conf))

    def on_confirmation(self, msg: ConfirmationMsg, sender: bytes | None, now: int) -> list[Outbound]:
        conf = msg.confirmation
        pending = self.outstanding
        if pending is None or conf.draft_digest != pending.draft.draft_digest:
            return self._drop(msg, sender, "unknown draft")
        if conf.creator in pending.confirmations:
            return self._drop(msg, sender, "duplicate confirmation")
        with self.profiler.section("blockchain_overhead_block"):
            if not conf.verify() or not ledger.confirmation_matches(pending.draft, conf):
                return self._drop(msg, sender, "invalid confirmation")
        with self.profiler.section("gather_confirmation"):
            pending.confirmations[conf.creator] = conf
        if pending.expected <= set(pending.confirmations):
            return self._try_finalize(now, timed_out=False)
        return []

    def _try_finalize(self, now: int, *, timed_out: bool) -> list[Outbound]:
        pending = self.outstanding
        assert pending is not None
        threshold = self.params.confirmation_threshold
        confs = [pending.confirmations[c] for c in sorted(pending.confirmations)]
        try:
            with self.profiler.section("blockchain_overhead_block"):
                block = ledger.finalize_block(pending.draft, confs, threshold)
        except ledger.InsufficientConfirmations as exc:
            if not timed_out:
                return []
            if not pending.retried:
                pending.retried = True
                pending.sent_at = now
                self._log("draft_retry", height=pending.draft.height, coverage=exc.fraction)
                return self._broadcast(DraftBlockMsg(pending.draft))
            self.outstanding = None
            self.unfinalized_blocks += 1
            self._log("block_unfinalized", height=pending.draft.height, coverage=exc.fraction)
            return self.maybe_generate_block(now)
        self.chain.append(block)
        self.outstanding = None
        self._log("block_finalized", height=block.height, transactions=len(block.transactions),
                  confirmations=len(block.confirmed_digests()))
        return self.maybe_generate_block(now)

    def on_timer(self, now: int) -> list[Outbound]:
        if self.halted or not self.params.ledger:
            return []
        pending = self.outstanding
        if pending is not None and now - pending.sent_at >= self.params.confirmation_timeout:
            return self._try_finalize(now, timed_out=True)
        return self.maybe_generate_block(now)
