from moonshot.core import GENESIS, GENESIS_CERT, Block, form_timeout_certificate
from moonshot.engine import Commit, SetTimer, TimerFired
from moonshot.messages import (BlockResponse, CertMsg, OptPropose, Propose, Status, TCMsg,
                               TimeoutMsg, VoteMsg)

from util import Net, deliver, records, sent, start


def chain(k):
    out = [GENESIS]
    for v in range(1, k + 1):
        out.append(Block(view=v, height=v, parent=out[-1].hash))
    return out


def tc_for(net, view, signers=(0, 2, 3)):
    return form_timeout_certificate([net.timeout(s, view) for s in signers], net.n, net.f)


def in_view_2(net, me=1):
    node = net.node("simple", me)
    start(node)
    b = chain(1)
    deliver(node, CertMsg(net.cert(b[1].hash, 1)), 0)
    assert node.view == 2
    return node


def test_advance_via_tc_sends_status():
    net = Net()
    node = in_view_2(net, me=1)
    acts = deliver(node, TCMsg(tc_for(net, 4)), 2, at=1.0)
    assert node.view == 5
    assert sent(acts, TCMsg)
    status = sent(acts, Status)
    assert len(status) == 1 and status[0].view == 5 and status[0].lock.view == 1
    assert any(isinstance(a, SetTimer) and a.kind == "view" and a.duration == 5.0 for a in acts)


def test_advance_via_cert_updates_lock_without_status():
    net = Net()
    node = in_view_2(net)
    b = Block(view=2, height=2, parent=chain(1)[1].hash)
    acts = deliver(node, CertMsg(net.cert(b.hash, 2)), 2)
    assert node.view == 3 and node.lock.view == 2
    assert not sent(acts, Status)
    assert [m.cert.view for m in sent(acts, CertMsg)] == [2]


def test_cert_then_tc_for_same_view():
    net = Net()
    node = in_view_2(net)
    deliver(node, CertMsg(net.cert(chain(4)[4].hash, 4)), 2)
    assert node.view == 5
    acts = deliver(node, TCMsg(tc_for(net, 4)), 2)
    assert node.view == 5 and not records(acts, "enter")


def test_lock_changes_only_at_view_entry():
    net = Net()
    node = in_view_2(net)
    # a certificate below the current view only raises the highest certificate
    deliver(node, TCMsg(tc_for(net, 5)), 2)
    assert node.view == 6 and node.lock.view == 1
    deliver(node, CertMsg(net.cert(chain(3)[3].hash, 3)), 2)
    assert node.view == 6 and node.lock.view == 1 and node.highest.view == 3
    deliver(node, TCMsg(tc_for(net, 6)), 2)
    assert node.view == 7 and node.lock.view == 3


def _leader_in_view_3(net):
    # node 2 leads view 3; enter it via TC_2 so it must wait for C_2 or 2 delta
    node = net.node("simple", 2)
    start(node)
    b = chain(2)
    for blk in b[1:]:
        deliver(node, BlockResponse(blk), 0)
    deliver(node, CertMsg(net.cert(b[1].hash, 1)), 0)
    acts = deliver(node, TCMsg(tc_for(net, 2, signers=(0, 1, 3))), 0, at=1.0)
    assert node.view == 3 and not sent(acts, Propose)
    assert any(isinstance(a, SetTimer) and a.kind == "propose" and a.duration == 2.0 for a in acts)
    return node, b


def test_propose_on_certificate_before_deadline():
    net = Net()
    node, b = _leader_in_view_3(net)
    acts = deliver(node, CertMsg(net.cert(b[2].hash, 2)), 0, at=1.4)
    props = sent(acts, Propose)
    assert len(props) == 1 and props[0].block.parent == b[2].hash and props[0].cert.view == 2


def test_propose_at_deadline_uses_highest_certificate():
    net = Net()
    node, b = _leader_in_view_3(net)
    acts = node.step(TimerFired("propose", 3, 3.0))
    props = sent(acts, Propose)
    assert len(props) == 1 and props[0].cert.view == 1 and props[0].block.parent == b[1].hash
    # exactly one normal proposal per view
    acts = deliver(node, CertMsg(net.cert(b[2].hash, 2)), 0, at=3.0)
    assert not sent(acts, Propose)


def test_optimistic_and_normal_proposal_carry_same_block():
    net = Net()
    # node 1 leads view 2 and votes for node 0's block in view 1
    node = net.node("simple", 1)
    start(node)
    b1 = Block(view=1, height=1, parent=GENESIS.hash)
    acts = deliver(node, Propose(block=b1, cert=GENESIS_CERT, view=1), 0)
    opt = sent(acts, OptPropose)
    assert sent(acts, VoteMsg) and len(opt) == 1 and opt[0].view == 2
    acts = deliver(node, CertMsg(net.cert(b1.hash, 1)), 0)
    normal = sent(acts, Propose)
    assert len(normal) == 1 and normal[0].block == opt[0].block


def _voter_in_view(net, v, lock_view):
    """Node 3 sitting in view v with its lock at ``lock_view``; returns (node, chain)."""
    node = net.node("simple", 3)
    start(node)
    b = chain(v)
    for blk in b[1:]:
        deliver(node, BlockResponse(blk), 0)
    deliver(node, CertMsg(net.cert(b[lock_view].hash, lock_view)), 0)
    if lock_view != v - 1:
        deliver(node, TCMsg(tc_for(net, v - 1, signers=(0, 1, 2))), 0)
    assert node.view == v and node.lock.view == lock_view
    return node, b


def test_optimistic_vote_requires_lock_on_parent():
    net = Net()
    node, b = _voter_in_view(net, 4, 3)
    child = Block(view=4, height=4, parent=b[3].hash)
    assert sent(deliver(node, OptPropose(block=child, view=4), net.cfg.leader(4)), VoteMsg)
    node, b = _voter_in_view(net, 4, 2)
    child = Block(view=4, height=3, parent=b[2].hash)
    assert not sent(deliver(node, OptPropose(block=child, view=4), net.cfg.leader(4)), VoteMsg)


def test_normal_vote_needs_certificate_at_least_lock():
    net = Net()
    node, b = _voter_in_view(net, 5, 3)
    low = net.cert(b[2].hash, 2)
    child = Block(view=5, height=3, parent=b[2].hash)
    assert not sent(deliver(node, Propose(block=child, cert=low, view=5), net.cfg.leader(5)),
                    VoteMsg)
    node, b = _voter_in_view(net, 5, 3)
    ok = Block(view=5, height=4, parent=b[3].hash)
    acts = deliver(node, Propose(block=ok, cert=net.cert(b[3].hash, 3), view=5),
                   net.cfg.leader(5))
    assert [m.vote.block_hash for m in sent(acts, VoteMsg)] == [ok.hash]


def test_single_vote_per_view_against_equivocation():
    net = Net()
    node, b = _voter_in_view(net, 4, 3)
    leader = net.cfg.leader(4)
    x = Block(view=4, height=4, parent=b[3].hash, payload=b"x")
    y = Block(view=4, height=4, parent=b[3].hash, payload=b"y")
    assert sent(deliver(node, OptPropose(block=x, view=4), leader), VoteMsg)
    assert not sent(deliver(node, Propose(block=y, cert=net.cert(b[3].hash, 3), view=4), leader),
                    VoteMsg)


def test_timer_and_timeout_joining():
    net = Net()
    node = in_view_2(net)
    acts = node.step(TimerFired("view", 2, 7.0))
    assert [m.timeout.view for m in sent(acts, TimeoutMsg)] == [2]
    node = in_view_2(net)
    acts = deliver(node, TimeoutMsg(net.timeout(0, 2)), 0)
    assert not sent(acts, TimeoutMsg)  # f = 1 timeout is not enough
    acts = deliver(node, TimeoutMsg(net.timeout(2, 2)), 2)
    assert [m.timeout.view for m in sent(acts, TimeoutMsg)] == [2]
    # after timing out the node no longer votes in the view
    blk = Block(view=2, height=2, parent=chain(1)[1].hash)
    acts = deliver(node, OptPropose(block=blk, view=2), 1)
    assert not sent(acts, VoteMsg)


def test_early_timeouts_count_once_view_is_entered():
    net = Net()
    node = in_view_2(net)
    deliver(node, TimeoutMsg(net.timeout(0, 3)), 0)
    acts = deliver(node, TimeoutMsg(net.timeout(2, 3)), 2)
    assert not sent(acts, TimeoutMsg)
    acts = deliver(node, CertMsg(net.cert(chain(2)[2].hash, 2)), 0)
    assert node.view == 3
    assert [m.timeout.view for m in sent(acts, TimeoutMsg)] == [3]


def _commits(acts):
    return [b.hash for a in acts if isinstance(a, Commit) for b in a.blocks]


def test_two_chain_commit():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    b = chain(4)
    for blk in b[1:]:
        deliver(node, BlockResponse(blk), 0)
    deliver(node, CertMsg(net.cert(b[3].hash, 3)), 0)
    acts = deliver(node, CertMsg(net.cert(b[4].hash, 4)), 0)
    assert _commits(acts) == [b[1].hash, b[2].hash, b[3].hash]
    acts = deliver(node, CertMsg(net.cert(b[4].hash, 4, signers=(1, 2, 3))), 0)
    assert _commits(acts) == []


def test_no_commit_across_a_gap():
    net = Net()
    node = net.node("simple", 3)
    start(node)
    b = chain(3)
    for blk in b[1:]:
        deliver(node, BlockResponse(blk), 0)
    c5 = Block(view=5, height=3, parent=b[2].hash)
    deliver(node, BlockResponse(c5), 0)
    deliver(node, CertMsg(net.cert(b[2].hash, 3)), 0)
    acts = deliver(node, CertMsg(net.cert(c5.hash, 5)), 0)
    assert _commits(acts) == []
