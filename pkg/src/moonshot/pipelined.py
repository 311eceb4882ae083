"""Pipelined Moonshot: optimistic, normal and fallback proposals, 3-delta timer."""

from __future__ import annotations

from typing import Optional, Union

from .core import GENESIS_CERT, Block, BlockCertificate, TimeoutCertificate, TimeoutMessage, VoteKind
from .engine import Node
from .messages import CertMsg, FbPropose, OptPropose, Propose, TCMsg, TimeoutMsg, VoteMsg


class PipelinedMoonshot(Node):
    protocol = "pipelined"
    view_timer = 3
    vote_kinds = frozenset({VoteKind.OPTIMISTIC, VoteKind.NORMAL, VoteKind.FALLBACK})
    carries_locks = True

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.lock: BlockCertificate = GENESIS_CERT
        self.timeout_view = 0
        self.timed_out: set[int] = set()
        self.opt_voted: Optional[bytes] = None
        self.final_voted = False
        self.seen: set[str] = set()
        self._opt_proposed: set[int] = set()
        self._pending_proposal: Optional[tuple[int, Union[BlockCertificate, TimeoutCertificate]]] = None

    # -- hooks for the commit variant ----------------------------------------

    def before_advance(self, cert: BlockCertificate) -> None:
        pass

    def after_certificate(self, cert: BlockCertificate) -> None:
        self.two_chain(cert)

    # -- view management -----------------------------------------------------

    def on_start(self) -> None:
        self.set_timer("view", 1, self.view_timer * self.delta)
        if self.leader(1) == self.me:
            self._propose(GENESIS_CERT)

    def on_certificate(self, cert: BlockCertificate) -> None:
        if cert.view > self.lock.view:
            self.lock = cert
            self.record("lock", cert.view, cert.block_hash.hex())
        self.before_advance(cert)
        if cert.view >= self.view:
            self._advance(cert.view + 1, cert)
        self.after_certificate(cert)

    def on_tc(self, tc: TimeoutCertificate) -> None:
        if tc.view >= self.view:
            self._send_timeout(tc.view)
            self._advance(tc.view + 1, tc)

    def _advance(self, v: int, via: Union[BlockCertificate, TimeoutCertificate]) -> None:
        if isinstance(via, BlockCertificate):
            self.multicast(CertMsg(via))
        else:
            self.unicast(self.leader(v), TCMsg(via))
        self.view = v
        self.entered_at = self.now
        self.opt_voted = None
        self.final_voted = False
        self.seen.clear()
        self._pending_proposal = None
        self.record("enter", v, "cert" if isinstance(via, BlockCertificate) else "tc")
        self.set_timer("view", v, self.view_timer * self.delta)
        if self.leader(v) == self.me:
            self._propose(via)
        self.release_parked(v)

    def on_timer(self, kind: str, view: int, key) -> None:
        if kind == "view" and view == self.view:
            self.record("timer", kind, view)
            self._send_timeout(view)

    # -- timeouts ------------------------------------------------------------

    def _send_timeout(self, v: int) -> None:
        if v in self.timed_out:
            return
        self.timed_out.add(v)
        self.timeout_view = max(self.timeout_view, v)
        lock = self.lock
        compact = self.cfg.compact_tc
        draft = TimeoutMessage(view=v, signer=self.me, signature=b"", lock=lock,
                               lock_view=lock.view, compact=compact)
        t = TimeoutMessage(view=v, signer=self.me, signature=self.sign(draft.signing_bytes),
                           lock=lock, lock_view=lock.view, compact=compact)
        self.multicast(TimeoutMsg(t))
        self.record("timeout", v, lock.view)

    def on_timeout_pooled(self, t: TimeoutMessage, count: int) -> None:
        if count >= self.f + 1 and t.view >= self.view:
            self._send_timeout(t.view)

    # -- proposing -----------------------------------------------------------

    def _propose(self, via: Union[BlockCertificate, TimeoutCertificate]) -> None:
        cert = via if isinstance(via, BlockCertificate) else via.highest_lock
        parent = self.store.get(cert.block_hash)
        if parent is None:
            self._pending_proposal = (self.view, via)
            self.need_block(cert.block_hash, cert.signers, urgent=True)
            return
        block = self.make_block(self.view, parent)
        self.add_block(block)
        if isinstance(via, BlockCertificate):
            self.multicast(Propose(block=block, cert=cert, view=self.view))
            self.record("propose", "normal", self.view, block.hash.hex())
        else:
            self.multicast(FbPropose(block=block, cert=cert, tc=via, view=self.view))
            self.record("propose", "fallback", self.view, block.hash.hex())

    def on_blocks_added(self, blocks: list[Block]) -> None:
        self.retry_two_chain(blocks)
        pending = self._pending_proposal
        if pending is not None and pending[0] == self.view:
            via = pending[1]
            want = via.block_hash if isinstance(via, BlockCertificate) else via.highest_lock.block_hash
            if any(b.hash == want for b in blocks):
                self._pending_proposal = None
                self._propose(via)

    # -- voting --------------------------------------------------------------

    def on_proposal(self, msg, sender: int) -> None:
        if msg.kind in self.seen:
            return
        self.seen.add(msg.kind)
        v = self.view
        block = msg.block
        if isinstance(msg, OptPropose):
            if (self.timeout_view < v - 1 and self.lock.view == v - 1
                    and self.lock.block_hash == block.parent
                    and self.opt_voted is None and not self.final_voted):
                self._vote(VoteKind.OPTIMISTIC, block)
        elif isinstance(msg, Propose):
            if (self.timeout_view < v and msg.cert.view == v - 1
                    and block.parent == msg.cert.block_hash
                    and self.opt_voted in (None, block.hash) and not self.final_voted):
                self._vote(VoteKind.NORMAL, block)
        elif isinstance(msg, FbPropose):
            high = msg.tc.highest_lock
            if (self.timeout_view < v and msg.tc.view == v - 1 and high is not None
                    and msg.cert.view == high.view and msg.cert.block_hash == high.block_hash
                    and block.parent == high.block_hash and not self.final_voted):
                self._vote(VoteKind.FALLBACK, block)

    def _vote(self, kind: VoteKind, block: Block) -> None:
        v = self.view
        if kind == VoteKind.OPTIMISTIC:
            self.opt_voted = block.hash
        else:
            self.final_voted = True
        self.multicast(VoteMsg(self.make_vote(kind, block.hash, v)))
        self.record("vote", kind.name, v, block.hash.hex())
        if self.leader(v + 1) == self.me and v not in self._opt_proposed:
            self._opt_proposed.add(v)
            child = self.make_block(v + 1, block)
            self.add_block(child)
            self.multicast(OptPropose(block=child, view=v + 1))
            self.record("propose", "opt", v + 1, child.hash.hex())
