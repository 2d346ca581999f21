from collections import deque
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfl import ledger
from dfl.crypto import generate_identity
from dfl.data import POISON_MAX_WEIGHT, Behavior
from dfl.model import Architecture, BufferEntry, Samples, init_model
from dfl.protocol import (ConfirmationMsg, DraftBlockMsg, ProtocolNode, ProtocolParams, ReceiptedTransactionMsg,
                          TransactionMsg)
from dfl.reputation import ReputationTable

ARCH = Architecture(4, (4,), 2)
GENESIS = ledger.make_genesis(ARCH.descriptor, lr=0.1, batch_size=8, test_batch_size=8, ttl=1,
                              transactions_per_block=4, buffer_capacity=4)


def samples(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    return Samples(rng.standard_normal((n, 4)) + 2.0 * labels[:, None], labels)


def make_node(i, behavior="honest", accuracy=0.5, **params):
    defaults = dict(batch_size=8, buffer_capacity=4, transactions_per_block=4, lifetime=100,
                    confirmation_timeout=5, receipt_wait=2)
    defaults.update(params)
    acc = accuracy if callable(accuracy) else (lambda m: accuracy)
    events = []
    node = ProtocolNode(generate_identity(500 + i), Behavior(behavior), init_model(ARCH, 0), ARCH, GENESIS,
                        ProtocolParams(**defaults), acc, poison_rng=np.random.default_rng(i),
                        event_log=events.append, name=f"n{i}")
    node.events = events
    return node


class Net:
    """FIFO zero-delay delivery between hand-wired nodes, with an optional drop filter."""

    def __init__(self, nodes, edges=None):
        self.nodes = {n.address: n for n in nodes}
        pairs = edges if edges is not None else [(a, b) for a in range(len(nodes)) for b in range(a + 1, len(nodes))]
        for a, b in pairs:
            nodes[a].peers.add(nodes[b].address)
            nodes[b].peers.add(nodes[a].address)
        self.queue = deque()
        self.drop = lambda sender, dest, msg: False
        self.delivered = []

    def post(self, sender, outs):
        for out in outs:
            for dest in out.to:
                self.queue.append((sender, dest, out.message))

    def run(self, now=0):
        while self.queue:
            sender, dest, msg = self.queue.popleft()
            if self.drop(sender, dest, msg):
                continue
            self.delivered.append((sender, dest, msg))
            self.post(dest, self.nodes[dest].on_message(msg, sender, now))

    def feed(self, node, n, now=0, seed=0):
        self.post(node.address, node.on_data(samples(n, seed), now))
        self.run(now)


def test_training_threshold():
    node = make_node(0)
    node.peers.add(b"\x01" * 32)
    assert node.on_data(samples(7), 0) == []
    out = node.on_data(samples(1, 1), 0)
    assert len(out) == 1 and isinstance(out[0].message, TransactionMsg)
    assert len(node.data_queue) == 0 and node.trainings == 1
    out = node.on_data(samples(20, 2), 1)
    assert len(out) == 2 and len(node.data_queue) == 4


def test_observer_never_trains_or_broadcasts():
    node = make_node(0, "observer")
    node.peers.add(b"\x01" * 32)
    before = node.model
    for k in range(80):
        assert node.on_data(samples(8, k), k) == []
    assert node.trainings == 0 and node.transactions_sent == 0 and node.model is before


def test_model_poisoner_trains_but_sends_noise():
    node = make_node(0, "model_poisoner")
    node.peers.add(b"\x01" * 32)
    out = node.on_data(samples(8), 0)
    sent = out[0].message.transaction.ml_model
    assert node.trainings == 1
    assert max(a.max() for a in sent.arrays) <= POISON_MAX_WEIGHT and min(a.min() for a in sent.arrays) >= 0
    assert not np.array_equal(sent.arrays[0], node.model.arrays[0])


def _tx(node, ttl=1, now=0, lifetime=100):
    return ledger.create_transaction(node.identity, init_model(ARCH, 3), ttl, now, lifetime)


def test_fresh_transaction_gets_one_receipt():
    gen, me, other = make_node(0), make_node(1), make_node(2)
    Net([gen, me, other])
    tx = _tx(gen)
    out = me.on_message(TransactionMsg(tx), gen.address, 1)
    assert len(out) == 1 and isinstance(out[0].message, ReceiptedTransactionMsg)
    assert set(out[0].to) == {gen.address, other.address}
    rc = out[0].message.transaction.receipts
    assert len(rc) == 1 and rc[0].creator == me.address and rc[0].received_at_ttl == 0
    assert len(me.fedavg_buffer) == 1

    # a third node hearing the receipted copy has no ttl left for it
    assert other.on_message(out[0].message, me.address, 1) == []
    assert len(other.fedavg_buffer) == 0 and other.events[-1]["cause"] == "ttl exhausted"

    assert me.on_message(TransactionMsg(tx), gen.address, 2) == []
    assert len(me.fedavg_buffer) == 1 and me.events[-1]["cause"] == "duplicate"


def test_larger_ttl_is_forwarded_further():
    gen, me, other = make_node(0), make_node(1), make_node(2)
    Net([gen, me, other])
    out = me.on_message(TransactionMsg(_tx(gen, ttl=2)), gen.address, 1)
    relayed = out[0].message
    assert relayed.transaction.receipts[0].received_at_ttl == 1
    back = other.on_message(relayed, me.address, 1)
    assert len(back) == 1 and back[0].message.transaction.receipts[-1].received_at_ttl == 0
    assert len(other.fedavg_buffer) == 1


def test_expired_and_forged_transactions_dropped():
    gen, me = make_node(0), make_node(1)
    Net([gen, me])
    assert me.on_message(TransactionMsg(_tx(gen, lifetime=10)), gen.address, 11) == []
    assert me.events[-1]["cause"] == "expired" and len(me.fedavg_buffer) == 0
    forged = replace(_tx(gen), ml_model=init_model(ARCH, 4))
    assert me.on_message(TransactionMsg(forged), gen.address, 0) == []
    assert me.events[-1]["cause"] == "bad transaction signature" and len(me.fedavg_buffer) == 0


@given(st.lists(st.integers(0, 3), min_size=1, max_size=20))
@settings(max_examples=40, deadline=None)
def test_each_digest_enters_buffer_once(order):
    gen, me = make_node(0), make_node(1, buffer_capacity=100)
    Net([gen, me])
    txs = [_tx(gen, now=k) for k in range(4)]
    for k in order:
        me.on_message(TransactionMsg(txs[k]), gen.address, 0)
    assert len(me.fedavg_buffer) == len(set(order))
    mine = [e for e in me.events if e["event"] == "receipt"]
    assert len(mine) == len(set(order))


def test_half_fedavg_fixed_point():
    node = make_node(0)
    for _ in range(4):
        node.fedavg_buffer.add(BufferEntry(b"\x01" * 32, node.model, 0.5))
    before = node.model
    node.update_model(0)
    assert all(np.array_equal(a, b) for a, b in zip(before.arrays, node.model.arrays))
    assert len(node.fedavg_buffer) == 0 and node.update_log[-1].accuracy == 0.5


def test_zero_reputation_sender_has_no_influence():
    honest, bad = b"\x05" * 32, b"\x01" * 32
    results = []
    for seed in (10, 11):
        node = make_node(0, policy="reputation_0.05")
        node.reputation = ReputationTable({bad: 0.0})
        node.fedavg_buffer.add(BufferEntry(honest, init_model(ARCH, 1), 0.9))
        node.fedavg_buffer.add(BufferEntry(bad, init_model(ARCH, seed), 0.1))
        node.fedavg_buffer.add(BufferEntry(honest, init_model(ARCH, 2), 0.8))
        node.fedavg_buffer.add(BufferEntry(honest, init_model(ARCH, 3), 0.7))
        node.update_model(0)
        assert node.reputation[bad] == 0.0 and node.reputation[honest] == 1.0
        results.append(node.model)
    assert all(np.array_equal(a, b) for a, b in zip(results[0].arrays, results[1].arrays))


def test_update_only_when_buffer_fills():
    gen, me = make_node(0), make_node(1)
    Net([gen, me])
    for k in range(3):
        me.on_message(TransactionMsg(_tx(gen, now=k)), gen.address, 0)
    assert me.update_log == []
    me.on_message(TransactionMsg(_tx(gen, now=3)), gen.address, 0)
    assert len(me.update_log) == 1 and len(me.fedavg_buffer) == 0


def test_two_nodes_build_a_block():
    a, b = make_node(0), make_node(1)
    net = Net([a, b])
    net.feed(a, 32)
    assert len(a.chain) == 1 and b.chain == []
    block = a.chain[0]
    assert ledger.verify_chain(a.chain, GENESIS)
    assert ledger.chain_stats(a.chain).as_dict() == {"transactions_per_block": 4, "confirmations_per_block": 4.0,
                                                      "peers": 1, "blocks": 1}
    confs = [m for _, _, m in net.delivered if isinstance(m, ConfirmationMsg)]
    assert len(confs) == 1 and len(confs[0].confirmation.confirmed_receipt_digests) == 4
    assert block.generator == a.address


def test_three_peers_twelve_transactions():
    nodes = [make_node(i, transactions_per_block=12, buffer_capacity=12) for i in range(4)]
    net = Net(nodes)
    net.feed(nodes[0], 8 * 12)
    block = nodes[0].chain[0]
    assert len(block.transactions) == 12 and len(block.confirmed_digests()) == 36


def test_draft_without_my_receipts_gets_no_reply():
    a, b, c = make_node(0), make_node(1), make_node(2)
    net = Net([a, b, c], edges=[(0, 1), (0, 2)])
    net.drop = lambda s, d, m: d == c.address
    net.feed(a, 32)
    assert a.outstanding is None
    outs = a.on_timer(2)
    draft = next(o.message for o in outs if isinstance(o.message, DraftBlockMsg))
    assert c.on_message(draft, a.address, 2) == []
    assert c.events[-1]["cause"] == "nothing to confirm"


def test_duplicate_confirmation_ignored():
    a, b, c = make_node(0), make_node(1), make_node(2)
    net = Net([a, b, c])
    held = []

    def hold_c(s, d, m):
        if isinstance(m, ConfirmationMsg) and s == c.address:
            held.append(m)
            return True
        return False

    net.drop = hold_c
    net.feed(a, 32)
    assert a.chain == [] and a.outstanding is not None
    conf_b = a.outstanding.confirmations[b.address]
    assert a.on_message(ConfirmationMsg(conf_b), b.address, 0) == []
    assert a.events[-1]["cause"] == "duplicate confirmation"
    a.on_message(held[0], c.address, 0)
    assert len(a.chain) == 1 and len(a.chain[0].confirmed_digests()) == 8


def test_lost_confirmation_retry_then_finalize():
    a, b = make_node(0), make_node(1)
    net = Net([a, b])
    lost = []
    net.drop = lambda s, d, m: isinstance(m, ConfirmationMsg) and not lost and (lost.append(m) or True)
    net.feed(a, 32)
    assert a.chain == []
    net.post(a.address, a.on_timer(3))
    assert a.chain == []
    net.post(a.address, a.on_timer(5))
    net.run(5)
    assert [e["event"] for e in a.events].count("draft_retry") == 1
    assert len(a.chain) == 1
    resent = [m for _, _, m in net.delivered if isinstance(m, ConfirmationMsg)]
    assert resent == lost


def test_unfinalized_after_second_timeout():
    a, b = make_node(0), make_node(1)
    net = Net([a, b])
    net.drop = lambda s, d, m: isinstance(m, ConfirmationMsg)
    net.feed(a, 32)
    net.post(a.address, a.on_timer(5))
    net.run(5)
    net.post(a.address, a.on_timer(10))
    assert a.chain == [] and a.unfinalized_blocks == 1 and a.outstanding is None


def test_single_node_extends_its_own_chain():
    node = make_node(0, single_node=True)
    for k in range(8):
        node.on_data(samples(8, k), k)
    assert len(node.chain) == 2
    assert ledger.verify_chain(node.chain, GENESIS)
    assert ledger.chain_stats(node.chain).peers == 0


def test_divergence_halts_node():
    node = make_node(0, lr=1e300)
    node.peers.add(b"\x01" * 32)
    big = Samples(np.full((8, 4), 1e200), np.zeros(8, dtype=np.int64))
    node.on_data(big, 0)
    node.on_data(big, 1)
    assert node.halted and node.events[-1]["event"] == "halt"
    assert node.on_data(samples(8), 2) == []
