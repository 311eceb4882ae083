from moonshot.core import (GENESIS, GENESIS_CERT, Block, BlockCertificate, VoteKind,
                           form_timeout_certificate)
from moonshot.messages import (BlockRequest, BlockResponse, CertMsg, OptPropose, Propose, TCMsg,
                               VoteMsg)

from util import Net, deliver, records, sent, start

S = VoteKind.SIMPLE


def test_genesis_proposal_gets_a_vote():
    net = Net()
    leader, voter = net.node("simple", 0), net.node("simple", 1)
    acts = start(leader)
    prop = sent(acts, Propose)[0]
    assert prop.cert == GENESIS_CERT and prop.block.parent == GENESIS.hash
    start(voter)
    acts = deliver(voter, prop, 0)
    assert [m.vote.block_hash for m in sent(acts, VoteMsg)] == [prop.block.hash]


def _script(net):
    b1 = Block(view=1, height=1, parent=GENESIS.hash)
    return [(Propose(block=b1, cert=GENESIS_CERT, view=1), 0),
            (VoteMsg(net.vote(0, S, b1.hash, 1)), 0),
            (VoteMsg(net.vote(2, S, b1.hash, 1)), 2),
            (VoteMsg(net.vote(3, S, b1.hash, 1)), 3)]


def test_step_is_deterministic():
    net = Net()
    runs = []
    for _ in range(2):
        node = net.node("simple", 1)
        acts = start(node)
        for msg, sender in _script(net):
            acts += deliver(node, msg, sender)
        runs.append(acts)
    assert runs[0] == runs[1]


def test_quorum_of_votes_forms_certificate_once():
    net = Net()
    node = net.node("simple", 1)
    start(node)
    acts = []
    for msg, sender in _script(net):
        acts += deliver(node, msg, sender)
    assert len(records(acts, "cert")) == 1 and node.view == 2


def test_stale_votes_are_dropped():
    net = Net()
    node = net.node("simple", 1)
    start(node)
    deliver(node, TCMsg(form_timeout_certificate([net.timeout(s, 4) for s in (0, 2, 3)], 4, 1)), 0)
    assert node.view == 5
    h = GENESIS.hash
    for s in range(3):
        deliver(node, VoteMsg(net.vote(s, S, h, 2)), s)
    assert not node.vote_pools


def test_embedded_certificate_processed_before_proposal():
    net = Net()
    node = net.node("simple", 2)
    start(node)
    b1 = Block(view=1, height=1, parent=GENESIS.hash)
    deliver(node, BlockResponse(b1), 0)
    c1 = net.cert(b1.hash, 1)
    b2 = Block(view=2, height=2, parent=b1.hash)
    acts = deliver(node, Propose(block=b2, cert=c1, view=2), 1)
    assert node.view == 2
    assert [m.vote.view for m in sent(acts, VoteMsg)] == [2]


def test_stale_proposal_still_advances_through_its_certificate():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    b = Block(view=1, height=1, parent=GENESIS.hash)
    deliver(node, BlockResponse(b), 0)
    c3 = net.cert(b.hash, 3)
    deliver(node, CertMsg(c3), 0)
    assert node.view == 4
    c2 = net.cert(b.hash, 2)
    old = Block(view=2, height=2, parent=b.hash)
    acts = deliver(node, Propose(block=old, cert=c2, view=2), 1)
    assert not sent(acts, VoteMsg) and node.highest.view == 3


def test_future_proposal_is_parked_and_released():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    b1 = Block(view=1, height=1, parent=GENESIS.hash)
    deliver(node, BlockResponse(b1), 0)
    b2 = Block(view=2, height=2, parent=b1.hash)
    acts = deliver(node, OptPropose(block=b2, view=2), 1)
    assert not sent(acts, VoteMsg) and node.view == 1
    acts = deliver(node, CertMsg(net.cert(b1.hash, 1)), 0)
    assert node.view == 2
    assert [m.vote.block_hash for m in sent(acts, VoteMsg)] == [b2.hash]


def test_parked_proposals_for_skipped_views_are_discarded():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    b1 = Block(view=1, height=1, parent=GENESIS.hash)
    deliver(node, BlockResponse(b1), 0)
    deliver(node, OptPropose(block=Block(view=2, height=2, parent=b1.hash), view=2), 1)
    acts = deliver(node, TCMsg(form_timeout_certificate([net.timeout(s, 2) for s in (0, 1, 2)],
                                                        4, 1)), 0)
    assert node.view == 3 and not sent(acts, VoteMsg) and not node._parked


def test_forwarded_certificate_far_ahead_jumps_views():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    deliver(node, CertMsg(net.cert(GENESIS.hash, 7)), 0)
    assert node.view == 8


def test_invalid_certificate_is_rejected():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    c = net.cert(GENESIS.hash, 2)
    forged = BlockCertificate(view=2, block_hash=c.block_hash, kind=c.kind,
                              votes=(c.votes[0], c.votes[0], c.votes[1]))
    acts = deliver(node, CertMsg(forged), 0)
    assert node.view == 1 and records(acts, "drop")
    bad_sig = BlockCertificate(view=2, block_hash=c.block_hash, kind=c.kind,
                               votes=(c.votes[0], c.votes[1],
                                      type(c.votes[2])(kind=S, block_hash=c.block_hash, view=2,
                                                       signer=2, signature=b"\0" * 16)))
    deliver(node, CertMsg(bad_sig), 0)
    assert node.view == 1


def test_wrong_leader_proposal_is_dropped():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    blk = Block(view=1, height=1, parent=GENESIS.hash)
    acts = deliver(node, Propose(block=blk, cert=GENESIS_CERT, view=1), 2)
    assert not sent(acts, VoteMsg)
    assert [r[0] for r in records(acts, "drop")] == ["bad-proposer"]


def test_missing_parent_is_fetched_then_voted():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    b1 = Block(view=1, height=1, parent=GENESIS.hash)
    deliver(node, CertMsg(net.cert(b1.hash, 1)), 0)
    b2 = Block(view=2, height=2, parent=b1.hash)
    acts = deliver(node, Propose(block=b2, cert=net.cert(b1.hash, 1), view=2), 1)
    assert {m.block_hash for m in sent(acts, BlockRequest)} == {b1.hash}
    acts = deliver(node, BlockResponse(b1), 0)
    assert [m.vote.block_hash for m in sent(acts, VoteMsg)] == [b2.hash]
