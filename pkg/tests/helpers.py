"""Builders shared by several test modules."""

from __future__ import annotations

import random
from dataclasses import fields, replace

from dfl import ledger
from dfl.crypto import generate_identity
from dfl.model import ModelParams, default_architecture, init_model


def genesis(tx_per_block: int = 2, threshold: float = 0.8) -> ledger.GenesisBlock:
    return ledger.make_genesis(default_architecture().descriptor, lr=0.1, batch_size=64, test_batch_size=100,
                               ttl=1, transactions_per_block=tx_per_block, buffer_capacity=4,
                               confirmation_threshold=threshold)


def build_chain(blocks: int = 3, peers: int = 2, tx_per_block: int = 2, seed: int = 0):
    """A finalized chain where every peer receipts and confirms every transaction."""
    gen = genesis(tx_per_block)
    owner = generate_identity(seed * 100)
    others = [generate_identity(seed * 100 + 1 + i) for i in range(peers)]
    arch = default_architecture()
    chain: list[ledger.Block] = []
    t = 0
    for h in range(blocks):
        txs = []
        for k in range(tx_per_block):
            tx = ledger.create_transaction(owner, init_model(arch, seed + 10 * h + k), 1, t, 100)
            for rc in [ledger.create_receipt(peer, tx, 0.5 + 0.01 * j, t) for j, peer in enumerate(others)]:
                tx = tx.with_receipt(rc)
            txs.append(tx)
            t += 1
        prev = chain[-1].final_digest if chain else gen.genesis_digest
        draft = ledger.draft_block(owner, txs, prev, gen.genesis_digest, height=h)
        confs = [ledger.confirm_block(p, draft) for p in others]
        chain.append(ledger.finalize_block(draft, confs, gen.threshold))
    return chain, gen, owner, others


# ---------------------------------------------------------------- single-field mutations


def _flip_bytes(value: bytes, rng: random.Random) -> bytes:
    if not value:
        return b"\x01"
    i = rng.randrange(len(value))
    return value[:i] + bytes([value[i] ^ (1 << rng.randrange(8))]) + value[i + 1:]


def _mutate_value(value, rng: random.Random):
    if isinstance(value, bytes):
        return _flip_bytes(value, rng)
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value + rng.choice([-1, 1]) if value > 0 else value + rng.randint(1, 5)
    if isinstance(value, float):
        new = rng.random()
        return new if new != value else (value + 0.5) % 1.0
    if isinstance(value, ModelParams):
        k = rng.randrange(len(value.arrays))
        arrays = [a.copy() for a in value.arrays]
        arrays[k][rng.randrange(arrays[k].size)] += rng.choice([-1, 1]) * rng.uniform(1e-9, 1.0)
        return ModelParams(value.names, tuple(arrays), value.architecture_id)
    raise TypeError(type(value))


def _mutate_record(obj, rng: random.Random, skip=()):
    """Replace one scalar field of a frozen dataclass."""
    names = [f.name for f in fields(obj)
             if f.name not in skip and not isinstance(getattr(obj, f.name), tuple) and getattr(obj, f.name) is not None]
    name = rng.choice(names)
    return replace(obj, **{name: _mutate_value(getattr(obj, name), rng)}), name


def mutate_chain(chain, rng: random.Random):
    """Return a copy of `chain` with exactly one field changed, plus a description."""
    chain = list(chain)
    i = rng.randrange(len(chain))
    block = chain[i]
    target = rng.choice(["block", "transaction", "receipt", "confirmation", "confirmed_digest",
                         "drop_receipt", "drop_confirmation", "swap_blocks", "reorder_transactions"])
    if target == "block":
        block, name = _mutate_record(block, rng)
        what = f"block.{name}"
    elif target in ("transaction", "receipt", "drop_receipt", "reorder_transactions"):
        txs = list(block.transactions)
        t = rng.randrange(len(txs))
        tx = txs[t]
        if target == "transaction":
            tx, name = _mutate_record(tx, rng)
            what = f"transaction.{name}"
        elif target == "reorder_transactions":
            txs[0], txs[-1] = txs[-1], txs[0]
            what = "transaction order"
        else:
            rcs = list(tx.receipts)
            r = rng.randrange(len(rcs))
            if target == "receipt":
                rcs[r], name = _mutate_record(rcs[r], rng)
                what = f"receipt.{name}"
            else:
                del rcs[r]
                what = "dropped receipt"
            tx = replace(tx, receipts=tuple(rcs))
        if target != "reorder_transactions":
            txs[t] = tx
        block = replace(block, transactions=tuple(txs))
    elif target in ("confirmation", "confirmed_digest", "drop_confirmation"):
        confs = list(block.confirmations)
        c = rng.randrange(len(confs))
        if target == "confirmation":
            confs[c], name = _mutate_record(confs[c], rng)
            what = f"confirmation.{name}"
        elif target == "confirmed_digest":
            ds = list(confs[c].confirmed_receipt_digests)
            d = rng.randrange(len(ds))
            ds[d] = _flip_bytes(ds[d], rng)
            confs[c] = replace(confs[c], confirmed_receipt_digests=tuple(ds))
            what = "confirmed receipt digest"
        else:
            del confs[c]
            what = "dropped confirmation"
        block = replace(block, confirmations=tuple(confs))
    else:
        j = (i + 1) % len(chain)
        chain[i], chain[j] = chain[j], chain[i]
        return chain, f"swapped blocks {i} and {j}", min(i, j)
    chain[i] = block
    return chain, what, i
