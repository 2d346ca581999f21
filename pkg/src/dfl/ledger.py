"""Transactions, receipts, blocks and confirmations: the proof-of-contribution chain.

Every artifact carries its signer's public key next to the address so that
any holder can check `address == hash(public_key)` and the signature without
a key directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import crypto
from .codec import DecodeError, Reader, Writer
from .crypto import NodeIdentity, hash_bytes
from .model import ModelParams

CHAIN_MAGIC = b"DFL1"
DEFAULT_THRESHOLD = 0.8


class LedgerError(ValueError):
    pass


class TTLExhausted(LedgerError):
    """The transaction must not travel any further."""


class TransactionExpired(LedgerError):
    pass


class DuplicateReceipt(LedgerError):
    pass


class NothingToConfirm(LedgerError):
    pass


class AlreadyConfirmed(LedgerError):
    pass


class InsufficientConfirmations(LedgerError):
    def __init__(self, fraction: float, threshold: float) -> None:
        super().__init__(f"insufficient confirmations: coverage {fraction:.4f} < threshold {threshold}")
        self.fraction = fraction
        self.threshold = threshold


def _signer_ok(address: bytes, public_key: bytes, digest: bytes, signature: bytes) -> bool:
    if crypto.address_of(public_key) != address:
        return False
    try:
        return crypto.verify(public_key, digest, signature)
    except crypto.KeyMaterialError:
        return False


# ---------------------------------------------------------------- genesis

@dataclass(frozen=True)
class GenesisBlock:
    model_architecture: str
    hyperparameters: Mapping[str, Any]
    protocol_params: Mapping[str, Any]

    def content(self) -> bytes:
        return (Writer()
                .text(self.model_architecture)
                .text(json.dumps(dict(self.hyperparameters), sort_keys=True, separators=(",", ":")))
                .text(json.dumps(dict(self.protocol_params), sort_keys=True, separators=(",", ":")))
                .getvalue())

    @property
    def genesis_digest(self) -> bytes:
        return hash_bytes(self.content())

    @property
    def threshold(self) -> float:
        return float(self.protocol_params.get("confirmation_threshold", DEFAULT_THRESHOLD))

    def to_json(self) -> dict:
        return {
            "model_architecture": self.model_architecture,
            "hyperparameters": dict(self.hyperparameters),
            "protocol_params": dict(self.protocol_params),
            "genesis_digest": self.genesis_digest.hex(),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "GenesisBlock":
        g = cls(data["model_architecture"], dict(data["hyperparameters"]), dict(data["protocol_params"]))
        if "genesis_digest" in data and data["genesis_digest"] != g.genesis_digest.hex():
            raise LedgerError("genesis digest does not match its content")
        return g


def make_genesis(architecture: str, *, lr: float, batch_size: int, test_batch_size: int,
                 ttl: int, transactions_per_block: int, buffer_capacity: int,
                 confirmation_threshold: float = DEFAULT_THRESHOLD) -> GenesisBlock:
    return GenesisBlock(
        model_architecture=architecture,
        hyperparameters={"lr": lr, "batch_size": batch_size, "test_batch_size": test_batch_size},
        protocol_params={
            "ttl": ttl,
            "transactions_per_block": transactions_per_block,
            "buffer_capacity": buffer_capacity,
            "confirmation_threshold": confirmation_threshold,
            "signature_scheme": crypto.SIGNATURE_SCHEME,
            "hash": crypto.HASH_SCHEME,
        },
    )


# ---------------------------------------------------------------- receipts

@dataclass(frozen=True)
class Receipt:
    creator: bytes
    transaction_digest: bytes
    received_at_ttl: int
    accuracy: float
    signature: bytes
    public_key: bytes

    def content(self) -> bytes:
        return (Writer().blob(self.creator).blob(self.transaction_digest)
                .u64(self.received_at_ttl).f64(self.accuracy).getvalue())

    @property
    def digest(self) -> bytes:
        return hash_bytes(self.content())

    def verify(self) -> bool:
        return 0.0 <= self.accuracy <= 1.0 and _signer_ok(
            self.creator, self.public_key, self.digest, self.signature)

    def encode(self, w: Writer) -> None:
        w.blob(self.creator).blob(self.transaction_digest).u64(self.received_at_ttl)
        w.f64(self.accuracy).blob(self.signature).blob(self.public_key)

    @classmethod
    def decode(cls, r: Reader) -> "Receipt":
        return cls(r.blob(), r.blob(), r.u64(), r.f64(), r.blob(), r.blob())


# ---------------------------------------------------------------- transactions

@dataclass(frozen=True)
class Transaction:
    generator: bytes
    create_time: int
    expire_time: int
    ml_model: ModelParams
    ttl: int
    digest: bytes
    signature: bytes
    public_key: bytes
    receipts: tuple[Receipt, ...] = ()

    def content(self) -> bytes:
        return transaction_content(self.generator, self.create_time, self.expire_time,
                                   self.ml_model, self.ttl)

    def with_receipt(self, receipt: Receipt) -> "Transaction":
        if receipt.transaction_digest != self.digest:
            raise LedgerError("receipt references a different transaction")
        return replace(self, receipts=self.receipts + (receipt,))

    def encode(self, w: Writer) -> None:
        w.blob(self.generator).u64(self.create_time).u64(self.expire_time)
        self.ml_model.encode(w)
        w.u64(self.ttl).blob(self.digest).blob(self.signature).blob(self.public_key)
        w.u32(len(self.receipts))
        for rc in self.receipts:
            rc.encode(w)

    @classmethod
    def decode(cls, r: Reader) -> "Transaction":
        generator, create, expire = r.blob(), r.u64(), r.u64()
        model = ModelParams.decode(r)
        ttl, digest, sig, pub = r.u64(), r.blob(), r.blob(), r.blob()
        receipts = tuple(Receipt.decode(r) for _ in range(r.u32()))
        return cls(generator, create, expire, model, ttl, digest, sig, pub, receipts)


def transaction_content(generator: bytes, create_time: int, expire_time: int,
                        model: ModelParams, ttl: int) -> bytes:
    w = Writer().blob(generator).u64(create_time).u64(expire_time)
    model.encode(w)
    return w.u64(ttl).getvalue()


def create_transaction(identity: NodeIdentity, model: ModelParams, ttl: int, now: int,
                       lifetime: int, *, sign: bool = True) -> Transaction:
    if ttl < 1:
        raise LedgerError("ttl must be at least 1 for a transaction to be sent")
    if lifetime <= 0:
        raise LedgerError("lifetime must be positive")
    expire = now + lifetime
    digest = hash_bytes(transaction_content(identity.address, now, expire, model, ttl))
    signature = crypto.sign(identity, digest) if sign else b""
    return Transaction(identity.address, now, expire, model, ttl, digest, signature, identity.public_key)


def verify_transaction(tx: Transaction) -> bool:
    if tx.create_time >= tx.expire_time:
        return False
    if hash_bytes(tx.content()) != tx.digest:
        return False
    return _signer_ok(tx.generator, tx.public_key, tx.digest, tx.signature)


def compute_received_at_ttl(tx: Transaction) -> int:
    """min(ttl, smallest received_at_ttl among receipts) - 1; no receipts means ttl - 1."""
    lowest = min((rc.received_at_ttl for rc in tx.receipts), default=tx.ttl)
    value = min(tx.ttl, lowest) - 1
    if value < 0:
        raise TTLExhausted(f"received_at_ttl would be {value}")
    return value


def create_receipt(identity: NodeIdentity, tx: Transaction, measured_accuracy: float,
                   now: int | None = None, *, sign: bool = True) -> Receipt:
    if not 0.0 <= measured_accuracy <= 1.0:
        raise LedgerError(f"accuracy {measured_accuracy} outside [0, 1]")
    if now is not None and now > tx.expire_time:
        raise TransactionExpired(f"transaction expired at {tx.expire_time}, now {now}")
    if any(rc.creator == identity.address for rc in tx.receipts):
        raise DuplicateReceipt("this node already receipted the transaction")
    received = compute_received_at_ttl(tx)
    unsigned = Receipt(identity.address, tx.digest, received, float(measured_accuracy), b"", identity.public_key)
    if not sign:
        return unsigned
    return replace(unsigned, signature=crypto.sign(identity, unsigned.digest))


# ---------------------------------------------------------------- confirmations

@dataclass(frozen=True)
class Confirmation:
    creator: bytes
    draft_digest: bytes
    confirmed_receipt_digests: tuple[bytes, ...]
    signature: bytes
    public_key: bytes

    def content(self) -> bytes:
        w = Writer().blob(self.creator).blob(self.draft_digest).u32(len(self.confirmed_receipt_digests))
        for d in self.confirmed_receipt_digests:
            w.blob(d)
        return w.getvalue()

    @property
    def digest(self) -> bytes:
        return hash_bytes(self.content())

    def verify(self) -> bool:
        return _signer_ok(self.creator, self.public_key, self.digest, self.signature)

    def encode(self, w: Writer) -> None:
        w.raw(self.content()).blob(self.signature).blob(self.public_key)

    @classmethod
    def decode(cls, r: Reader) -> "Confirmation":
        creator, draft = r.blob(), r.blob()
        digests = tuple(r.blob() for _ in range(r.u32()))
        return cls(creator, draft, digests, r.blob(), r.blob())


# ---------------------------------------------------------------- blocks

@dataclass(frozen=True)
class Block:
    generator: bytes
    height: int
    prev_final_digest: bytes
    genesis_digest: bytes
    transactions: tuple[Transaction, ...]
    draft_digest: bytes
    signature: bytes
    public_key: bytes
    confirmations: tuple[Confirmation, ...] = ()
    final_digest: bytes | None = None

    def draft_content(self) -> bytes:
        w = (Writer().blob(self.generator).u64(self.height).blob(self.prev_final_digest)
             .blob(self.genesis_digest).u32(len(self.transactions)))
        for tx in self.transactions:
            tx.encode(w)
        return w.getvalue()

    def final_content(self) -> bytes:
        w = Writer().blob(self.draft_digest).u32(len(self.confirmations))
        for c in self.confirmations:
            c.encode(w)
        return w.getvalue()

    @property
    def finalized(self) -> bool:
        return self.final_digest is not None

    def receipts(self) -> list[Receipt]:
        return [rc for tx in self.transactions for rc in tx.receipts]

    def confirmed_digests(self) -> set[bytes]:
        return {d for c in self.confirmations for d in c.confirmed_receipt_digests}

    def as_draft(self) -> "Block":
        return replace(self, confirmations=(), final_digest=None)

    def encode(self, w: Writer) -> None:
        w.raw(self.draft_content()).blob(self.draft_digest).blob(self.signature).blob(self.public_key)
        w.u32(len(self.confirmations))
        for c in self.confirmations:
            c.encode(w)
        w.u8(1 if self.final_digest is not None else 0)
        if self.final_digest is not None:
            w.blob(self.final_digest)

    @classmethod
    def decode(cls, r: Reader) -> "Block":
        generator, height, prev, genesis = r.blob(), r.u64(), r.blob(), r.blob()
        txs = tuple(Transaction.decode(r) for _ in range(r.u32()))
        draft, sig, pub = r.blob(), r.blob(), r.blob()
        confs = tuple(Confirmation.decode(r) for _ in range(r.u32()))
        final = r.blob() if r.u8() else None
        return cls(generator, height, prev, genesis, txs, draft, sig, pub, confs, final)

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()


def draft_block(identity: NodeIdentity, pending: Sequence[Transaction], prev_final: bytes,
                genesis: bytes, height: int = 0, *, sign: bool = True) -> Block:
    if not pending:
        raise LedgerError("cannot draft a block without transactions")
    for tx in pending:
        if not tx.receipts:
            raise LedgerError(f"transaction {tx.digest.hex()[:12]} has no receipts")
        if any(rc.transaction_digest != tx.digest for rc in tx.receipts):
            raise LedgerError("receipt references a transaction outside the block")
    unsigned = Block(identity.address, height, prev_final, genesis, tuple(pending), b"", b"", identity.public_key)
    digest = hash_bytes(unsigned.draft_content())
    signature = crypto.sign(identity, digest) if sign else b""
    return replace(unsigned, draft_digest=digest, signature=signature)


def verify_draft(block: Block) -> bool:
    if hash_bytes(block.draft_content()) != block.draft_digest:
        return False
    return _signer_ok(block.generator, block.public_key, block.draft_digest, block.signature)


def confirm_block(identity: NodeIdentity, draft: Block, history: set[bytes] | None = None) -> Confirmation:
    """Confirm this node's own valid receipts in `draft`.

    `history` holds the draft digests this identity has already confirmed; it
    is updated in place so a draft can never be confirmed twice.
    """
    if history is not None and draft.draft_digest in history:
        raise AlreadyConfirmed("draft already confirmed by this node")
    if hash_bytes(draft.draft_content()) != draft.draft_digest:
        raise LedgerError("draft digest does not match its content")
    own = []
    for tx in draft.transactions:
        for rc in tx.receipts:
            if rc.creator != identity.address or rc.transaction_digest != tx.digest:
                continue
            if rc.public_key != identity.public_key or not rc.verify():
                continue
            own.append(rc.digest)
    if not own:
        raise NothingToConfirm("nothing to confirm: no receipts by this node in the draft")
    unsigned = Confirmation(identity.address, draft.draft_digest, tuple(own), b"", identity.public_key)
    conf = replace(unsigned, signature=crypto.sign(identity, unsigned.digest))
    if history is not None:
        history.add(draft.draft_digest)
    return conf


def confirmation_matches(draft: Block, conf: Confirmation) -> bool:
    """Every confirmed digest names a receipt in `draft` written by the confirmer."""
    if conf.draft_digest != draft.draft_digest:
        return False
    by_digest = {rc.digest: rc for rc in draft.receipts()}
    return all(d in by_digest and by_digest[d].creator == conf.creator
               for d in conf.confirmed_receipt_digests)


def coverage(draft: Block, confirmations: Iterable[Confirmation]) -> float:
    total = len(draft.receipts())
    if total == 0:
        return 1.0
    confirmed = {d for c in confirmations for d in c.confirmed_receipt_digests}
    return len(confirmed) / total


def finalize_block(draft: Block, confirmations: Sequence[Confirmation],
                   threshold: float = DEFAULT_THRESHOLD) -> Block:
    for c in confirmations:
        if not c.verify():
            raise LedgerError(f"confirmation by {c.creator.hex()[:12]} has a bad signature")
        if not confirmation_matches(draft, c):
            raise LedgerError(f"confirmation by {c.creator.hex()[:12]} does not match the draft")
    creators = [c.creator for c in confirmations]
    if len(set(creators)) != len(creators):
        raise LedgerError("more than one confirmation from the same node")
    frac = coverage(draft, confirmations)
    if frac < threshold:
        raise InsufficientConfirmations(frac, threshold)
    block = replace(draft.as_draft(), confirmations=tuple(confirmations))
    return replace(block, final_digest=hash_bytes(block.final_content()))


# ---------------------------------------------------------------- chain verification

@dataclass(frozen=True)
class ChainReport:
    ok: bool
    height: int | None = None
    index: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _check_block(block: Block, genesis_digest: bytes, threshold: float) -> str | None:
    if block.genesis_digest != genesis_digest:
        return "genesis digest mismatch"
    if hash_bytes(block.draft_content()) != block.draft_digest:
        return "draft digest mismatch"
    if not _signer_ok(block.generator, block.public_key, block.draft_digest, block.signature):
        return "bad block signature"
    if block.final_digest is None:
        return "block is not finalized"
    if hash_bytes(block.final_content()) != block.final_digest:
        return "final digest mismatch"
    for tx in block.transactions:
        if tx.generator != block.generator:
            return "transaction not generated by the block generator"
        if not verify_transaction(tx):
            return f"bad transaction {tx.digest.hex()[:12]}"
        for rc in tx.receipts:
            if rc.transaction_digest != tx.digest:
                return "receipt references another transaction"
            if not rc.verify():
                return f"bad receipt by {rc.creator.hex()[:12]}"
    creators = set()
    for c in block.confirmations:
        if c.creator in creators:
            return "duplicate confirmation"
        creators.add(c.creator)
        if not c.verify():
            return f"bad confirmation by {c.creator.hex()[:12]}"
        if not confirmation_matches(block, c):
            return "confirmation does not match the block"
    if coverage(block, block.confirmations) < threshold:
        return "confirmation coverage below threshold"
    return None


def verify_chain(chain: Sequence[Block], genesis: GenesisBlock, threshold: float | None = None) -> ChainReport:
    """Check linking, digests and every signature; reports the first failure."""
    gdigest = genesis.genesis_digest
    threshold = genesis.threshold if threshold is None else threshold
    prev = gdigest
    for i, block in enumerate(chain):
        if block.height != i:
            return ChainReport(False, block.height, i, f"height {block.height} at position {i}")
        if block.prev_final_digest != prev:
            return ChainReport(False, block.height, i, "previous digest mismatch")
        reason = _check_block(block, gdigest, threshold)
        if reason:
            return ChainReport(False, block.height, i, reason)
        prev = block.final_digest
    return ChainReport(True)


# ---------------------------------------------------------------- persistence

def encode_chain(chain: Sequence[Block]) -> bytes:
    w = Writer().raw(CHAIN_MAGIC)
    for block in chain:
        w.blob(block.to_bytes())
    return w.getvalue()


def decode_chain(data: bytes) -> list[Block]:
    if data[:4] != CHAIN_MAGIC:
        raise DecodeError("missing DFL1 magic")
    r = Reader(data[4:])
    blocks = []
    while r.remaining:
        inner = Reader(r.blob())
        blocks.append(Block.decode(inner))
        inner.expect_end()
    return blocks


CHAIN_FILE = "chain.dfl"
GENESIS_FILE = "genesis.json"


def save_chain(directory: str | Path, chain: Sequence[Block], genesis: GenesisBlock) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / CHAIN_FILE).write_bytes(encode_chain(chain))
    (d / GENESIS_FILE).write_text(json.dumps(genesis.to_json(), indent=2))
    return d


def load_chain(directory: str | Path) -> tuple[list[Block], GenesisBlock]:
    d = Path(directory)
    chain = decode_chain((d / CHAIN_FILE).read_bytes())
    genesis = GenesisBlock.from_json(json.loads((d / GENESIS_FILE).read_text()))
    return chain, genesis


def block_to_json(block: Block) -> dict:
    return {
        "height": block.height,
        "generator": block.generator.hex(),
        "prev_final_digest": block.prev_final_digest.hex(),
        "genesis_digest": block.genesis_digest.hex(),
        "draft_digest": block.draft_digest.hex(),
        "final_digest": block.final_digest.hex() if block.final_digest else None,
        "transactions": [
            {
                "digest": tx.digest.hex(),
                "generator": tx.generator.hex(),
                "create_time": tx.create_time,
                "expire_time": tx.expire_time,
                "ttl": tx.ttl,
                "model_layers": {n: int(a.size) for n, a in tx.ml_model.layers},
                "receipts": [
                    {"creator": rc.creator.hex(), "received_at_ttl": rc.received_at_ttl,
                     "accuracy": rc.accuracy, "digest": rc.digest.hex()}
                    for rc in tx.receipts
                ],
            }
            for tx in block.transactions
        ],
        "confirmations": [
            {"creator": c.creator.hex(),
             "confirmed_receipt_digests": [d.hex() for d in c.confirmed_receipt_digests]}
            for c in block.confirmations
        ],
    }


def chain_to_json(chain: Sequence[Block], genesis: GenesisBlock | None = None) -> dict:
    out: dict[str, Any] = {"blocks": [block_to_json(b) for b in chain]}
    if genesis is not None:
        out["genesis"] = genesis.to_json()
    return out


@dataclass
class ChainStats:
    transactions_per_block: float
    confirmations_per_block: float
    peers: int
    blocks: int

    def as_dict(self) -> dict:
        return {"transactions_per_block": self.transactions_per_block,
                "confirmations_per_block": self.confirmations_per_block,
                "peers": self.peers, "blocks": self.blocks}


def chain_stats(chain: Sequence[Block]) -> ChainStats:
    """Blockchain statistics: mean transactions and confirmed receipts per block,
    and the number of distinct confirming peers (self-confirmations excluded)."""
    if not chain:
        raise LedgerError("empty chain")
    tx_counts = [len(b.transactions) for b in chain]
    conf_counts = [len(b.confirmed_digests()) for b in chain]
    peers = {c.creator for b in chain for c in b.confirmations if c.creator != b.generator}
    tpb = sum(tx_counts) / len(chain)
    return ChainStats(
        transactions_per_block=int(tpb) if tpb == int(tpb) else tpb,
        confirmations_per_block=sum(conf_counts) / len(chain),
        peers=len(peers),
        blocks=len(chain),
    )
