import itertools
import json
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from helpers import build_chain, genesis, mutate_chain
from dfl import ledger
from dfl.crypto import generate_identity
from dfl.model import default_architecture, init_model

ARCH = default_architecture()
A, B, C = (generate_identity(i) for i in (11, 12, 13))


def tx_with(ttl, values):
    base = ledger.create_transaction(A, init_model(ARCH, 0), 1, 0, 10, sign=False)
    receipts = tuple(ledger.Receipt(bytes([i]) * 32, base.digest, v, 0.5, b"", b"") for i, v in enumerate(values))
    return replace(base, ttl=ttl, receipts=receipts)


def test_received_at_ttl_examples():
    assert ledger.compute_received_at_ttl(tx_with(3, [])) == 2
    assert ledger.compute_received_at_ttl(tx_with(3, [2, 1])) == 0
    with pytest.raises(ledger.TTLExhausted):
        ledger.compute_received_at_ttl(tx_with(1, [0]))


def test_received_at_ttl_brute_force_table():
    for ttl in range(5):
        for size in range(4):
            for values in itertools.combinations_with_replacement(range(5), size):
                expected = oracles.received_at_ttl(ttl, list(values))
                if expected is None:
                    with pytest.raises(ledger.TTLExhausted):
                        ledger.compute_received_at_ttl(tx_with(ttl, values))
                else:
                    assert ledger.compute_received_at_ttl(tx_with(ttl, values)) == expected


def test_create_transaction():
    m = init_model(ARCH, 0)
    tx = ledger.create_transaction(A, m, 1, 100, 50)
    assert tx.expire_time == 150 and tx.receipts == ()
    assert ledger.verify_transaction(tx)
    assert ledger.create_transaction(A, m, 1, 100, 50).digest == tx.digest
    tampered = replace(tx, ml_model=init_model(ARCH, 1))
    assert not ledger.verify_transaction(tampered)
    with pytest.raises(ledger.LedgerError):
        ledger.create_transaction(A, m, 0, 100, 50)
    with pytest.raises(ledger.LedgerError):
        ledger.create_transaction(A, m, 1, 100, 0)


def test_receipts():
    tx = ledger.create_transaction(A, init_model(ARCH, 0), 1, 0, 10)
    rc = ledger.create_receipt(B, tx, 0.9, 5)
    assert rc.received_at_ttl == 0 and rc.verify()
    tx2 = tx.with_receipt(rc)
    assert tx2.digest == tx.digest and ledger.verify_transaction(tx2)
    with pytest.raises(ledger.DuplicateReceipt):
        ledger.create_receipt(B, tx2, 0.8, 5)
    with pytest.raises(ledger.TransactionExpired):
        ledger.create_receipt(C, tx, 0.9, 11)
    with pytest.raises(ledger.LedgerError):
        ledger.create_receipt(C, tx, 1.5, 5)
    forged = replace(rc, accuracy=0.1)
    assert not forged.verify()


@given(st.floats(0, 1), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_appending_receipts_keeps_digest(acc, now):
    tx = ledger.create_transaction(A, init_model(ARCH, 0), 2, now, 100)
    tx2 = tx.with_receipt(ledger.create_receipt(B, tx, acc, now))
    assert tx2.digest == tx.digest == ledger.hash_bytes(tx2.content())


def _receipted(n, confirmers=(B,), now=0):
    out = []
    for k in range(n):
        tx = ledger.create_transaction(A, init_model(ARCH, k), 1, now + k, 100)
        # each peer receipts the copy it got straight from the generator
        for rc in [ledger.create_receipt(p, tx, 0.5, now + k) for p in confirmers]:
            tx = tx.with_receipt(rc)
        out.append(tx)
    return out


def test_draft_and_confirm():
    g = genesis()
    txs = _receipted(4)
    draft = ledger.draft_block(A, txs, g.genesis_digest, g.genesis_digest)
    assert len(draft.transactions) == 4 and draft.confirmations == () and draft.final_digest is None
    assert ledger.draft_block(A, txs, g.genesis_digest, g.genesis_digest).draft_digest == draft.draft_digest
    history: set[bytes] = set()
    conf = ledger.confirm_block(B, draft, history)
    assert len(conf.confirmed_receipt_digests) == 4 and conf.verify()
    with pytest.raises(ledger.AlreadyConfirmed):
        ledger.confirm_block(B, draft, history)
    with pytest.raises(ledger.NothingToConfirm):
        ledger.confirm_block(C, draft)
    with pytest.raises(ledger.LedgerError):
        ledger.draft_block(A, [], g.genesis_digest, g.genesis_digest)
    bare = ledger.create_transaction(A, init_model(ARCH, 9), 1, 0, 10)
    with pytest.raises(ledger.LedgerError):
        ledger.draft_block(A, txs + [bare], g.genesis_digest, g.genesis_digest)


def test_finalize_threshold_arithmetic():
    peers = [generate_identity(100 + i) for i in range(3)]
    txs = _receipted(12, peers)
    g = genesis(12)
    draft = ledger.draft_block(A, txs, g.genesis_digest, g.genesis_digest)
    confs = [ledger.confirm_block(p, draft) for p in peers]
    block = ledger.finalize_block(draft, confs, 0.8)
    assert len(block.confirmed_digests()) == 36
    partial = replace(confs[2], confirmed_receipt_digests=confs[2].confirmed_receipt_digests[:4])
    partial = replace(partial, signature=peers[2].sign(partial.digest))
    with pytest.raises(ledger.InsufficientConfirmations) as err:
        ledger.finalize_block(draft, confs[:2] + [partial], 0.8)
    assert err.value.fraction == pytest.approx(28 / 36)
    assert ledger.finalize_block(draft, [], 0.0).final_digest is not None


def test_finalize_rejects_foreign_digests():
    txs = _receipted(2, (B, C))
    g = genesis()
    draft = ledger.draft_block(A, txs, g.genesis_digest, g.genesis_digest)
    conf_b = ledger.confirm_block(B, draft)
    stolen = replace(conf_b, creator=C.address, public_key=C.public_key)
    stolen = replace(stolen, signature=C.sign(stolen.digest))
    with pytest.raises(ledger.LedgerError):
        ledger.finalize_block(draft, [stolen], 0.5)


@given(st.lists(st.booleans(), min_size=3, max_size=3), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_coverage_is_monotone(include, threshold):
    peers = [generate_identity(200 + i) for i in range(3)]
    g = genesis()
    draft = ledger.draft_block(A, _receipted(2, peers), g.genesis_digest, g.genesis_digest)
    confs = [ledger.confirm_block(p, draft) for p in peers]
    chosen = [c for c, keep in zip(confs, include) if keep]
    if ledger.coverage(draft, chosen) >= threshold:
        for extra in confs:
            if extra not in chosen:
                assert ledger.coverage(draft, chosen + [extra]) >= threshold


def test_verify_chain_examples():
    chain, g, _, _ = build_chain(3)
    assert ledger.verify_chain(chain, g)
    chain2 = list(chain)
    tx = chain2[1].transactions[0]
    rc = replace(tx.receipts[0], accuracy=0.99)
    chain2[1] = replace(chain2[1], transactions=(replace(tx, receipts=(rc,) + tx.receipts[1:]),)
                        + chain2[1].transactions[1:])
    report = ledger.verify_chain(chain2, g)
    assert not report and report.index == 1
    swapped = [chain[0], chain[2], chain[1]]
    assert not ledger.verify_chain(swapped, g)
    assert not ledger.verify_chain(chain, genesis(tx_per_block=3))


_CHAIN = build_chain(3)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_any_single_mutation_is_detected(seed):
    chain, g, _, _ = _CHAIN
    mutated, what, _ = mutate_chain(chain, random.Random(seed))
    assert not ledger.verify_chain(mutated, g), what


def test_foreign_transaction_in_block_is_rejected():
    g = genesis()
    theirs = ledger.create_transaction(B, init_model(ARCH, 1), 1, 0, 10)
    theirs = theirs.with_receipt(ledger.create_receipt(C, theirs, 0.5, 0))
    draft = ledger.draft_block(A, [theirs], g.genesis_digest, g.genesis_digest)
    block = ledger.finalize_block(draft, [ledger.confirm_block(C, draft)], 0.8)
    assert not ledger.verify_chain([block], g)


def test_chain_persistence_roundtrip(tmp_path):
    chain, g, _, _ = build_chain(3)
    ledger.save_chain(tmp_path, chain, g)
    assert (tmp_path / ledger.CHAIN_FILE).read_bytes()[:4] == b"DFL1"
    loaded, g2 = ledger.load_chain(tmp_path)
    assert g2.genesis_digest == g.genesis_digest
    assert [b.to_bytes() for b in loaded] == [b.to_bytes() for b in chain]
    assert ledger.verify_chain(loaded, g2)
    doc = json.loads(json.dumps(ledger.chain_to_json(loaded, g2)))
    assert len(doc["blocks"]) == 3


def test_decode_rejects_garbage():
    with pytest.raises(ValueError):
        ledger.decode_chain(b"XXXX")
    data = ledger.encode_chain(build_chain(1)[0])
    with pytest.raises(ValueError):
        ledger.decode_chain(data[:-3])


def test_genesis_digest_is_shared_and_sensitive():
    assert genesis().genesis_digest == genesis().genesis_digest
    assert genesis(3).genesis_digest != genesis().genesis_digest
    g = genesis()
    assert ledger.GenesisBlock.from_json(g.to_json()).genesis_digest == g.genesis_digest
    bad = g.to_json()
    bad["hyperparameters"]["lr"] = 0.2
    with pytest.raises(ledger.LedgerError):
        ledger.GenesisBlock.from_json(bad)


def _stats_chain(blocks, txs, peers, drop=0):
    """Finalized blocks of `txs` transactions, each receipted and confirmed by `peers` peers."""
    ids = [generate_identity(300 + i) for i in range(peers)]
    out = []
    for h in range(blocks):
        batch = _receipted(txs, ids, now=h * 100)
        draft = ledger.draft_block(A, batch, b"\0" * 32, b"\0" * 32, height=h)
        confs = [ledger.confirm_block(p, draft) for p in ids]
        if drop:
            c = confs[-1]
            c = replace(c, confirmed_receipt_digests=c.confirmed_receipt_digests[drop:])
            confs[-1] = replace(c, signature=ids[-1].sign(c.digest))
        out.append(ledger.finalize_block(draft, [c for c in confs if c.confirmed_receipt_digests], 0.0)
                   if drop else ledger.finalize_block(draft, confs, 0.8))
    return out


def test_chain_stats_examples():
    s = ledger.chain_stats(_stats_chain(24, 4, 1))
    assert s.as_dict() == {"transactions_per_block": 4, "confirmations_per_block": 4.0, "peers": 1, "blocks": 24}
    s = ledger.chain_stats(_stats_chain(9, 12, 3))
    assert (s.transactions_per_block, s.confirmations_per_block, s.peers, s.blocks) == (12, 36.0, 3, 9)
    s = ledger.chain_stats(_stats_chain(1, 12, 3, drop=7))
    assert s.confirmations_per_block == 29.0
    with pytest.raises(ledger.LedgerError):
        ledger.chain_stats([])
