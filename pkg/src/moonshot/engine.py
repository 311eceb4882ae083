"""Reactor scaffolding shared by all protocol nodes.

A node is driven exclusively through :meth:`Node.step`, which consumes one
event and returns the actions it produced. The engine validates incoming
messages, runs embedded certificates through the protocol's certificate
rules before the message's own rule, parks proposals for future views,
aggregates votes and timeouts, fetches missing blocks and keeps the
committed log. Protocol subclasses supply the rules.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Union

from .core import (GENESIS, GENESIS_CERT, Block, BlockCertificate, ChainConflict, ChainStore,
                   InvalidBlock, TimeoutCertificate, TimeoutMessage, Vote, VoteKind,
                   certificate_well_formed, form_compact_tc, form_timeout_certificate,
                   make_payload, quorum_size, timeout_certificate_consistent,
                   vote_signing_bytes)
from .crypto import Keyring
from .messages import (PROPOSALS, BlockRequest, BlockResponse, CertMsg, FbPropose, Message,
                       OptPropose, Propose, Status, TCMsg, TimeoutMsg, VoteMsg)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# events and actions


@dataclass(frozen=True)
class Start:
    at: float = 0.0


@dataclass(frozen=True)
class Deliver:
    message: Message
    sender: int
    at: float


@dataclass(frozen=True)
class TimerFired:
    kind: str
    view: int
    at: float
    key: Optional[bytes] = None


Event = Union[Start, Deliver, TimerFired]


@dataclass(frozen=True)
class Multicast:
    message: Message


@dataclass(frozen=True)
class Unicast:
    to: int
    message: Message


@dataclass(frozen=True)
class SetTimer:
    kind: str
    view: int
    duration: float
    key: Optional[bytes] = None


@dataclass(frozen=True)
class Commit:
    blocks: tuple[Block, ...]
    direct: bytes


@dataclass(frozen=True)
class Record:
    label: str
    fields: tuple


Action = Union[Multicast, Unicast, SetTimer, Commit, Record]


@dataclass(frozen=True)
class NodeConfig:
    n: int
    f: int
    delta: float
    leaders: tuple[int, ...]
    payload_size: int = 0
    compact_tc: bool = False

    def leader(self, view: int) -> int:
        return self.leaders[(view - 1) % len(self.leaders)]


class Node:
    """Base reactor. Subclasses implement the protocol rules."""

    protocol = "base"
    view_timer = 3  # multiples of delta
    vote_kinds: frozenset = frozenset()
    carries_locks = True

    def __init__(self, me: int, config: NodeConfig, keyring: Keyring, secret: bytes) -> None:
        self.me = me
        self.cfg = config
        self.n, self.f = config.n, config.f
        self.quorum = quorum_size(config.n, config.f)
        self.delta = config.delta
        self.keyring = keyring
        self._secret = secret
        self.store = ChainStore()
        self.view = 1
        self.entered_at = 0.0
        self.now = 0.0
        self.certs: dict[int, dict[bytes, BlockCertificate]] = {0: {GENESIS.hash: GENESIS_CERT}}
        self.tcs: dict[int, TimeoutCertificate] = {}
        self.vote_pools: dict[tuple, dict[int, Vote]] = {}
        self.timeout_pools: dict[int, dict[int, TimeoutMessage]] = {}
        self._seen_certs: set[bytes] = {GENESIS_CERT.digest}
        self._parked: dict[int, dict[tuple, tuple[Message, int]]] = {}
        self._awaiting_parent: dict[bytes, list[tuple[Message, int]]] = {}
        self._asked: dict[bytes, set[int]] = {}
        self._fetch_hints: dict[bytes, set[int]] = {}
        self._commit_wanted: set[bytes] = set()
        self._cert_block_wanted: dict[bytes, list[BlockCertificate]] = {}
        self._queue: deque[tuple[Message, int]] = deque()
        self._out: list[Action] = []

    # -- public surface ----------------------------------------------------

    def leader(self, view: int) -> int:
        return self.cfg.leader(view)

    def step(self, event: Event) -> list[Action]:
        self.now = event.at
        self._out = []
        if isinstance(event, Deliver):
            self._queue.append((event.message, event.sender))
        elif isinstance(event, TimerFired):
            if event.kind == "fetch":
                self._on_fetch_timer(event.key)
            else:
                self.on_timer(event.kind, event.view, event.key)
        elif isinstance(event, Start):
            self.record("enter", 1, "start")
            self.on_start()
        while self._queue:
            msg, sender = self._queue.popleft()
            self._handle(msg, sender)
        out, self._out = self._out, []
        return out

    # -- action helpers ----------------------------------------------------

    def multicast(self, msg: Message) -> None:
        self._out.append(Multicast(msg))

    def unicast(self, to: int, msg: Message) -> None:
        if to != self.me:
            self._out.append(Unicast(to, msg))

    def set_timer(self, kind: str, view: int, duration: float, key: Optional[bytes] = None) -> None:
        self._out.append(SetTimer(kind, view, duration, key))

    def record(self, label: str, *fields) -> None:
        self._out.append(Record(label, fields))

    def sign(self, message: bytes) -> bytes:
        return self.keyring.scheme.sign(self._secret, message)

    def make_vote(self, kind: VoteKind, block_hash: bytes, view: int) -> Vote:
        sig = self.sign(vote_signing_bytes(kind, block_hash, view))
        return Vote(kind=kind, block_hash=block_hash, view=view, signer=self.me, signature=sig)

    def make_block(self, view: int, parent: Block) -> Block:
        payload = make_payload(view, self.me, self.cfg.payload_size)
        return Block(view=view, height=parent.height + 1, parent=parent.hash, payload=payload)

    def drop(self, reason: str, msg: Message) -> None:
        self.record("drop", reason, msg.kind)

    # -- hooks for subclasses ----------------------------------------------

    def on_start(self) -> None:
        pass

    def on_certificate(self, cert: BlockCertificate) -> None:
        """First time this (view, block) pair is known to be certified."""

    def on_tc(self, tc: TimeoutCertificate) -> None:
        """First valid TC for ``tc.view``."""

    def on_timeout_pooled(self, t: TimeoutMessage, count: int) -> None:
        pass

    def on_proposal(self, msg: Message, sender: int) -> None:
        """A proposal for the current view whose block is stored."""

    def on_status(self, msg: Status, sender: int) -> None:
        pass

    def on_commit_vote(self, vote: Vote) -> None:
        pass

    def on_timer(self, kind: str, view: int, key: Optional[bytes]) -> None:
        pass

    def on_blocks_added(self, blocks: list[Block]) -> None:
        pass

    # -- validation --------------------------------------------------------

    def cert_valid(self, cert: BlockCertificate) -> bool:
        if cert.is_genesis:
            return cert == GENESIS_CERT
        d = cert.digest
        if self.keyring.cert_known_valid(d):
            return True
        if not certificate_well_formed(cert, self.quorum):
            return False
        kr = self.keyring
        for v in cert.votes:
            if not kr.verify(v.signer, v.signing_bytes, v.signature):
                return False
        kr.mark_cert_valid(d)
        return True

    def timeout_valid(self, t: TimeoutMessage) -> bool:
        if self.carries_locks:
            if t.lock is None or t.lock_view != t.lock.view or t.compact != self.cfg.compact_tc:
                return False
        elif t.lock is not None or t.lock_view is not None:
            return False
        return self.keyring.verify(t.signer, t.signing_bytes, t.signature)

    def tc_valid(self, tc: TimeoutCertificate) -> bool:
        d = tc.digest
        if self.keyring.cert_known_valid(d):
            return True
        if not timeout_certificate_consistent(tc, self.quorum):
            return False
        if self.carries_locks != (tc.highest_lock is not None):
            return False
        if tc.highest_lock is not None and tc.compact != self.cfg.compact_tc:
            return False
        kr = self.keyring
        for t in tc.timeouts:
            if t.lock is not None and not self.cert_valid(t.lock):
                return False
            if not kr.verify(t.signer, t.signing_bytes, t.signature):
                return False
        if tc.highest_lock is not None and not self.cert_valid(tc.highest_lock):
            return False
        kr.mark_cert_valid(d)
        return True

    # -- certificate intake ------------------------------------------------

    def accept_cert(self, cert: BlockCertificate) -> bool:
        """Validate and, if new, run ``cert`` through the protocol's rules."""
        d = cert.digest
        if d in self._seen_certs:
            return True
        if not self.cert_valid(cert):
            return False
        self._seen_certs.add(d)
        per_view = self.certs.setdefault(cert.view, {})
        if cert.block_hash in per_view:
            return True
        per_view[cert.block_hash] = cert
        self.on_certificate(cert)
        return True

    def accept_tc(self, tc: TimeoutCertificate) -> bool:
        if tc.view in self.tcs:
            return True
        if not self.tc_valid(tc):
            return False
        self.tcs[tc.view] = tc
        self.on_tc(tc)
        return True

    # -- message dispatch --------------------------------------------------

    def _handle(self, msg: Message, sender: int) -> None:
        if isinstance(msg, VoteMsg):
            self._on_vote(msg.vote)
        elif isinstance(msg, CertMsg):
            if not self.accept_cert(msg.cert):
                self.drop("invalid-cert", msg)
        elif isinstance(msg, PROPOSALS):
            self._on_proposal(msg, sender)
        elif isinstance(msg, TimeoutMsg):
            self._on_timeout(msg)
        elif isinstance(msg, TCMsg):
            if not self.accept_tc(msg.tc):
                self.drop("invalid-tc", msg)
        elif isinstance(msg, Status):
            if not self.accept_cert(msg.lock):
                self.drop("invalid-cert", msg)
            else:
                self.on_status(msg, sender)
        elif isinstance(msg, BlockRequest):
            blk = self.store.get(msg.block_hash)
            if blk is not None:
                self.unicast(sender, BlockResponse(blk))
        elif isinstance(msg, BlockResponse):
            self.add_block(msg.block)
        else:
            log.debug("node %d: unknown message %r", self.me, msg)

    def _on_vote(self, vote: Vote) -> None:
        if vote.kind not in self.vote_kinds:
            self.record("drop", "vote-kind", "vote")
            return
        if vote.kind != VoteKind.COMMIT and vote.view < self.view - 1:
            return
        if not self.keyring.verify(vote.signer, vote.signing_bytes, vote.signature):
            self.record("drop", "bad-signature", "vote")
            return
        if vote.kind == VoteKind.COMMIT:
            self.on_commit_vote(vote)
            return
        pool = self.vote_pools.setdefault(vote.key, {})
        if vote.signer in pool:
            return
        pool[vote.signer] = vote
        if len(pool) == self.quorum:
            cert = BlockCertificate(view=vote.view, block_hash=vote.block_hash, kind=vote.kind,
                                    votes=tuple(pool[s] for s in sorted(pool)))
            self.keyring.mark_cert_valid(cert.digest)
            self.record("cert", vote.kind.name, vote.view, vote.block_hash.hex())
            self.accept_cert(cert)

    def _on_timeout(self, msg: TimeoutMsg) -> None:
        t = msg.timeout
        if not self.timeout_valid(t):
            self.drop("invalid-timeout", msg)
            return
        if t.lock is not None and not self.accept_cert(t.lock):
            self.drop("invalid-cert", msg)
            return
        if t.view < self.view:
            return
        pool = self.timeout_pools.setdefault(t.view, {})
        if t.signer in pool:
            return
        pool[t.signer] = t
        self.on_timeout_pooled(t, len(pool))
        if len(pool) >= self.quorum and t.view not in self.tcs:
            tc = self.build_tc(t.view)
            if tc is not None:
                self.keyring.mark_cert_valid(tc.digest)
                self.record("tc", tc.view, tc.highest_view if tc.highest_view is not None else -1)
                self.accept_tc(tc)

    def build_tc(self, view: int) -> Optional[TimeoutCertificate]:
        items = list(self.timeout_pools[view].values())
        if self.carries_locks and self.cfg.compact_tc:
            highest = max((t.lock for t in items), key=lambda c: c.view)
            return form_compact_tc(items, highest, self.n, self.f)
        return form_timeout_certificate(items, self.n, self.f)

    def _on_proposal(self, msg, sender: int) -> None:
        if sender != self.leader(msg.view) or msg.block.view != msg.view:
            self.drop("bad-proposer", msg)
            return
        if isinstance(msg, (Propose, FbPropose)):
            if not self.accept_cert(msg.cert):
                self.drop("invalid-cert", msg)
                return
            if isinstance(msg, FbPropose) and not self.accept_tc(msg.tc):
                self.drop("invalid-tc", msg)
                return
        if msg.view < self.view:
            return
        if msg.view > self.view:
            self._park(msg, sender)
            return
        try:
            status = self.add_block(msg.block)
        except InvalidBlock:
            self.drop("invalid-block", msg)
            return
        if status == "pending":
            self._awaiting_parent.setdefault(msg.block.parent, []).append((msg, sender))
            hints = {sender}
            parent_cert = self.certs_for(msg.block.parent)
            if parent_cert is not None:
                hints |= parent_cert.signers
            self.need_block(msg.block.parent, hints, urgent=True)
            return
        self.on_proposal(msg, sender)

    # -- parking of early proposals ------------------------------------------

    def _park(self, msg: Message, sender: int) -> None:
        slot = self._parked.setdefault(msg.view, {})
        slot[(sender, msg.kind)] = (msg, sender)

    def release_parked(self, view: int) -> None:
        """Re-inject proposals parked for ``view``; drop those for skipped views."""
        for pv in sorted(k for k in self._parked if k <= view):
            entries = self._parked.pop(pv)
            if pv == view:
                self._queue.extend(entries.values())

    # -- blocks --------------------------------------------------------------

    def certs_for(self, block_hash: bytes) -> Optional[BlockCertificate]:
        for per_view in self.certs.values():
            c = per_view.get(block_hash)
            if c is not None:
                return c
        return None

    def add_block(self, block: Block) -> str:
        status, added = self.store.insert(block)
        if added:
            for b in added:
                waiting = self._awaiting_parent.pop(b.hash, None)
                if waiting:
                    self._queue.extend(waiting)
                if b.hash in self._commit_wanted:
                    self._commit_wanted.discard(b.hash)
                    self.commit(b.hash)
            self.on_blocks_added(added)
        return status

    def need_block(self, h: bytes, peers: Iterable[int], urgent: bool = False) -> None:
        """Ask ``peers`` for block ``h``, now or after a grace period of delta."""
        if h in self.store:
            return
        peers = set(peers) - {self.me}
        if urgent:
            self._request(h, peers)
        else:
            hints = self._fetch_hints.get(h)
            if hints is None:
                self._fetch_hints[h] = set(peers)
                self.set_timer("fetch", self.view, self.delta, key=h)
            else:
                hints |= peers

    def _on_fetch_timer(self, h: Optional[bytes]) -> None:
        if h is None:
            return
        peers = self._fetch_hints.pop(h, set())
        if h not in self.store:
            self._request(h, peers)

    def _request(self, h: bytes, peers: set[int]) -> None:
        asked = self._asked.setdefault(h, set())
        for p in sorted(peers - asked):
            asked.add(p)
            self.unicast(p, BlockRequest(h))

    # -- committing ----------------------------------------------------------

    def commit(self, h: bytes) -> None:
        """Commit ``h`` and all of its uncommitted ancestors."""
        if self.store.is_committed(h):
            return
        if h not in self.store:
            self._commit_wanted.add(h)
            cert = self.certs_for(h)
            self.need_block(h, cert.signers if cert else ())
            return
        try:
            chain = self.store.commit(h)
        except ChainConflict:
            self.record("conflict", h.hex())
            return
        if chain:
            self._out.append(Commit(tuple(chain), h))

    def two_chain(self, cert: BlockCertificate) -> None:
        """Commit B_{k-1} once C_{v-1}(B_{k-1}) and C_v(B_k) with B_k -> B_{k-1} are known."""
        blk = self.store.get(cert.block_hash)
        if blk is None:
            self._cert_block_wanted.setdefault(cert.block_hash, []).append(cert)
            self.need_block(cert.block_hash, cert.signers)
            return
        prev = self.certs.get(cert.view - 1)
        if prev and blk.parent in prev:
            self.commit(blk.parent)
        nxt = self.certs.get(cert.view + 1)
        if nxt:
            for h in nxt:
                child = self.store.get(h)
                if child is not None and child.parent == blk.hash:
                    self.commit(blk.hash)

    def retry_two_chain(self, blocks: list[Block]) -> None:
        for b in blocks:
            for cert in self._cert_block_wanted.pop(b.hash, ()):
                self.two_chain(cert)
