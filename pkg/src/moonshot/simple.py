"""Simple Moonshot: one vote per view, optimistic proposals, 5-delta view timer."""

from __future__ import annotations

from typing import Optional, Union

from .core import GENESIS_CERT, Block, BlockCertificate, TimeoutCertificate, TimeoutMessage, VoteKind
from .engine import Node
from .messages import CertMsg, OptPropose, Propose, Status, TCMsg, TimeoutMsg, VoteMsg


class SimpleMoonshot(Node):
    protocol = "simple"
    view_timer = 5
    propose_wait = 2
    vote_kinds = frozenset({VoteKind.SIMPLE})
    carries_locks = False

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.lock: BlockCertificate = GENESIS_CERT
        self.highest: BlockCertificate = GENESIS_CERT
        self.voted = False
        self.seen_opt = False
        self.seen_normal = False
        self.proposed = False
        self.timed_out: set[int] = set()
        self._propose_pending: Optional[bytes] = None

    # -- view management ---------------------------------------------------

    def on_start(self) -> None:
        self.set_timer("view", 1, self.view_timer * self.delta)
        if self.leader(1) == self.me:
            self._propose()

    def on_certificate(self, cert: BlockCertificate) -> None:
        if cert.view > self.highest.view:
            self.highest = cert
        self.two_chain(cert)
        if cert.view >= self.view:
            self._advance(cert.view + 1, cert)
        elif (cert.view == self.view - 1 and self.leader(self.view) == self.me
              and not self.proposed
              and self.now <= self.entered_at + self.propose_wait * self.delta + 1e-9):
            self._propose()

    def on_tc(self, tc: TimeoutCertificate) -> None:
        if tc.view >= self.view:
            self._advance(tc.view + 1, tc)

    def _advance(self, v: int, via: Union[BlockCertificate, TimeoutCertificate]) -> None:
        if isinstance(via, BlockCertificate):
            self.multicast(CertMsg(via))
        else:
            self.multicast(TCMsg(via))
        if self.highest.view > self.lock.view:
            self.lock = self.highest
            self.record("lock", self.lock.view, self.lock.block_hash.hex())
        leader = self.leader(v)
        if self.lock.view < v - 1:
            self.unicast(leader, Status(v, self.lock))
        self.view = v
        self.entered_at = self.now
        self.voted = self.seen_opt = self.seen_normal = self.proposed = False
        self._propose_pending = None
        self.record("enter", v, "cert" if isinstance(via, BlockCertificate) else "tc")
        self.set_timer("view", v, self.view_timer * self.delta)
        if leader == self.me:
            if isinstance(via, BlockCertificate) and via.view == v - 1:
                self._propose()
            else:
                self.set_timer("propose", v, self.propose_wait * self.delta)
        self.release_parked(v)
        pool = self.timeout_pools.get(v)
        if pool and len(pool) >= self.f + 1:
            self._send_timeout(v)

    def on_timer(self, kind: str, view: int, key) -> None:
        if view != self.view:
            return
        self.record("timer", kind, view)
        if kind == "view":
            self._send_timeout(view)
        elif kind == "propose" and not self.proposed:
            self._propose()

    # -- timeouts ------------------------------------------------------------

    def _send_timeout(self, v: int) -> None:
        if v in self.timed_out:
            return
        self.timed_out.add(v)
        sig = self.sign(TimeoutMessage(view=v, signer=self.me, signature=b"").signing_bytes)
        self.multicast(TimeoutMsg(TimeoutMessage(view=v, signer=self.me, signature=sig)))
        self.record("timeout", v, -1)

    def on_timeout_pooled(self, t: TimeoutMessage, count: int) -> None:
        # only timeouts for the view we are in count towards joining
        if t.view == self.view and count >= self.f + 1:
            self._send_timeout(t.view)

    # -- proposing -----------------------------------------------------------

    def _propose(self) -> None:
        cert = self.highest
        parent = self.store.get(cert.block_hash)
        if parent is None:
            self._propose_pending = cert.block_hash
            self.need_block(cert.block_hash, cert.signers, urgent=True)
            return
        self.proposed = True
        block = self.make_block(self.view, parent)
        self.add_block(block)
        self.multicast(Propose(block=block, cert=cert, view=self.view))
        self.record("propose", "normal", self.view, block.hash.hex())

    def on_blocks_added(self, blocks: list[Block]) -> None:
        self.retry_two_chain(blocks)
        if self._propose_pending is not None and not self.proposed:
            if any(b.hash == self._propose_pending for b in blocks):
                self._propose_pending = None
                self._propose()

    def on_status(self, msg: Status, sender: int) -> None:
        pass  # the embedded lock already updated ``highest``

    # -- voting --------------------------------------------------------------

    def on_proposal(self, msg, sender: int) -> None:
        block = msg.block
        if isinstance(msg, OptPropose):
            if self.seen_opt:
                return
            self.seen_opt = True
            ok = self.lock.view == self.view - 1 and self.lock.block_hash == block.parent
        elif isinstance(msg, Propose):
            if self.seen_normal:
                return
            self.seen_normal = True
            ok = (msg.cert.view >= self.lock.view and msg.cert.block_hash in self.store
                  and self.store.extends(block.hash, msg.cert.block_hash))
        else:
            self.drop("wrong-protocol", msg)
            return
        if ok and not self.voted and self.view not in self.timed_out:
            self._vote(block)

    def _vote(self, block: Block) -> None:
        self.voted = True
        v = self.view
        self.multicast(VoteMsg(self.make_vote(VoteKind.SIMPLE, block.hash, v)))
        self.record("vote", "SIMPLE", v, block.hash.hex())
        if self.leader(v + 1) == self.me:
            child = self.make_block(v + 1, block)
            self.add_block(child)
            self.multicast(OptPropose(block=child, view=v + 1))
            self.record("propose", "opt", v + 1, child.hash.hex())
