"""Protocol-agnostic domain types shared by the three Moonshot variants.

Blocks, votes, block certificates, timeout messages and timeout
certificates live here, together with the pure operations on them
(quorum arithmetic, ranking, certificate formation, chain storage).

All signing encodings are built with :class:`Writer`: little-endian
fixed-width integers, 32-byte digests and u32-length-prefixed byte
strings, always in a fixed field order.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence

HASH_LEN = 32
NIL_HASH = bytes(HASH_LEN)


class ConfigError(ValueError):
    """Invalid system parameters (n, f, delays, ...)."""


class InvalidBlock(ValueError):
    pass


class ChainConflict(RuntimeError):
    """A commit target does not extend the committed tip."""


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# canonical encoding


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def f64(self, v: float) -> "Writer":
        self._parts.append(struct.pack("<d", v))
        return self

    def hash(self, h: bytes) -> "Writer":
        if len(h) != HASH_LEN:
            raise ValueError(f"digest must be {HASH_LEN} bytes, got {len(h)}")
        self._parts.append(h)
        return self

    def blob(self, b: bytes) -> "Writer":
        self._parts.append(struct.pack("<I", len(b)))
        self._parts.append(b)
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(b)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_buf", "_pos")

    def __init__(self, buf: bytes) -> None:
        self._buf = memoryview(buf)
        self._pos = 0

    def _take(self, k: int) -> memoryview:
        end = self._pos + k
        if end > len(self._buf):
            raise ValueError("truncated input")
        out = self._buf[self._pos:end]
        self._pos = end
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def hash(self) -> bytes:
        return bytes(self._take(HASH_LEN))

    def blob(self) -> bytes:
        return bytes(self._take(self.u32()))

    def at_end(self) -> bool:
        return self._pos == len(self._buf)

    def expect_end(self) -> None:
        if not self.at_end():
            raise ValueError(f"{len(self._buf) - self._pos} trailing bytes")


# ---------------------------------------------------------------------------
# quorum arithmetic


def quorum_size(n: int, f: int) -> int:
    """Smallest quorum: ceil((n + f + 1) / 2)."""
    if f < 0 or n < 3 * f + 1:
        raise ConfigError(f"need n >= 3f + 1 (n={n}, f={f})")
    return (n + f + 2) // 2


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True, eq=False)
class Block:
    view: int
    height: int
    parent: bytes
    payload: bytes = b""

    @cached_property
    def encoded(self) -> bytes:
        return (Writer().u64(self.view).u64(self.height).hash(self.parent)
                .blob(self.payload).getvalue())

    @cached_property
    def hash(self) -> bytes:
        return digest(self.encoded)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Block) and self.hash == other.hash

    def __hash__(self) -> int:
        return hash(self.hash)

    def __repr__(self) -> str:
        return f"Block(v={self.view}, h={self.height}, {self.hash.hex()[:8]})"

    @classmethod
    def decode(cls, r: Reader) -> "Block":
        return cls(view=r.u64(), height=r.u64(), parent=r.hash(), payload=r.blob())


GENESIS = Block(view=0, height=0, parent=NIL_HASH, payload=b"")


def make_payload(view: int, leader: int, size: int) -> bytes:
    """Deterministic payload bytes for (view, leader, size)."""
    if size <= 0:
        return b""
    return hashlib.shake_128(f"payload:{view}:{leader}".encode()).digest(size)


# ---------------------------------------------------------------------------
# votes and block certificates


class VoteKind(enum.IntEnum):
    SIMPLE = 0
    OPTIMISTIC = 1
    NORMAL = 2
    FALLBACK = 3
    COMMIT = 4

    @property
    def label(self) -> str:
        return _VOTE_LABELS[self]


_VOTE_LABELS = {
    VoteKind.SIMPLE: "vote",
    VoteKind.OPTIMISTIC: "opt-vote",
    VoteKind.NORMAL: "vote",
    VoteKind.FALLBACK: "fb-vote",
    VoteKind.COMMIT: "commit",
}

_TAG_VOTE = 0x56  # 'V'
_TAG_TIMEOUT = 0x54  # 'T'


def vote_signing_bytes(kind: VoteKind, block_hash: bytes, view: int) -> bytes:
    return Writer().u8(_TAG_VOTE).u8(int(kind)).hash(block_hash).u64(view).getvalue()


@dataclass(frozen=True)
class Vote:
    kind: VoteKind
    block_hash: bytes
    view: int
    signer: int
    signature: bytes

    @cached_property
    def signing_bytes(self) -> bytes:
        return vote_signing_bytes(self.kind, self.block_hash, self.view)

    @property
    def key(self) -> tuple[VoteKind, int, bytes]:
        return (self.kind, self.view, self.block_hash)


@dataclass(frozen=True)
class BlockCertificate:
    view: int
    block_hash: bytes
    kind: VoteKind
    votes: tuple[Vote, ...]

    @cached_property
    def signers(self) -> frozenset[int]:
        return frozenset(v.signer for v in self.votes)

    @cached_property
    def digest(self) -> bytes:
        w = Writer().u64(self.view).hash(self.block_hash).u8(int(self.kind))
        for v in self.votes:
            w.u32(v.signer).blob(v.signature)
        return digest(w.getvalue())

    @property
    def is_genesis(self) -> bool:
        return self.view == 0 and self.block_hash == GENESIS.hash

    def __repr__(self) -> str:
        return f"C{self.kind.name[0]}_{self.view}({self.block_hash.hex()[:8]})"


GENESIS_CERT = BlockCertificate(view=0, block_hash=GENESIS.hash, kind=VoteKind.SIMPLE, votes=())


def rank_compare(a: BlockCertificate, b: BlockCertificate) -> int:
    """-1, 0 or 1 by certificate view only; kind plays no part."""
    return (a.view > b.view) - (a.view < b.view)


def certificate_well_formed(cert: BlockCertificate, quorum: int) -> bool:
    """Structural check: quorum of distinct signers agreeing on (kind, hash, view)."""
    if cert.is_genesis:
        return cert == GENESIS_CERT
    if len(cert.signers) < quorum or len(cert.signers) != len(cert.votes):
        return False
    return all(v.kind == cert.kind and v.block_hash == cert.block_hash and v.view == cert.view
               for v in cert.votes)


def form_block_certificate(votes: Iterable[Vote], n: int, f: int) -> Optional[BlockCertificate]:
    """Aggregate the first (kind, hash, view) group that reaches a quorum.

    Votes of different kinds are never mixed. A repeated signer within a group
    counts once (first occurrence wins). Returns None when no group is complete.
    """
    q = quorum_size(n, f)
    groups: dict[tuple, dict[int, Vote]] = {}
    for v in votes:
        g = groups.setdefault(v.key, {})
        g.setdefault(v.signer, v)
        if len(g) >= q:
            kind, view, h = v.key
            picked = tuple(sorted(g.values(), key=lambda x: x.signer))
            return BlockCertificate(view=view, block_hash=h, kind=kind, votes=picked)
    return None


# ---------------------------------------------------------------------------
# timeouts


def timeout_signing_bytes(view: int, lock_view: Optional[int], lock_hash: Optional[bytes],
                          compact: bool) -> bytes:
    w = Writer().u8(_TAG_TIMEOUT).u64(view)
    if lock_view is None:
        w.u8(0)
    elif compact:
        w.u8(2).u64(lock_view)
    else:
        assert lock_hash is not None
        w.u8(1).u64(lock_view).hash(lock_hash)
    return w.getvalue()


@dataclass(frozen=True)
class TimeoutMessage:
    """A signed timeout for ``view``.

    Simple variant: no lock. Full variant: ``lock`` is the sender's lock and
    the signature covers its view and block hash. Compact variant: the
    signature covers only ``lock_view``; ``lock`` may be stripped once the
    attestation is folded into a compact certificate.
    """

    view: int
    signer: int
    signature: bytes
    lock: Optional[BlockCertificate] = None
    lock_view: Optional[int] = None
    compact: bool = False

    @cached_property
    def signing_bytes(self) -> bytes:
        lock_hash = self.lock.block_hash if self.lock is not None else None
        return timeout_signing_bytes(self.view, self.lock_view, lock_hash, self.compact)

    def attestation(self) -> "TimeoutMessage":
        """This compact timeout with its lock stripped."""
        if not self.compact:
            raise ValueError("only compact timeouts carry a view-number attestation")
        return TimeoutMessage(view=self.view, signer=self.signer, signature=self.signature,
                              lock=None, lock_view=self.lock_view, compact=True)


@dataclass(frozen=True)
class TimeoutCertificate:
    view: int
    timeouts: tuple[TimeoutMessage, ...]
    highest_lock: Optional[BlockCertificate] = None

    @cached_property
    def signers(self) -> frozenset[int]:
        return frozenset(t.signer for t in self.timeouts)

    @cached_property
    def digest(self) -> bytes:
        w = Writer().u64(self.view)
        for t in self.timeouts:
            w.u32(t.signer).blob(t.signature)
        if self.highest_lock is not None:
            w.hash(self.highest_lock.digest)
        return digest(w.getvalue())

    @property
    def compact(self) -> bool:
        return bool(self.timeouts) and self.timeouts[0].compact

    @property
    def highest_view(self) -> Optional[int]:
        return None if self.highest_lock is None else self.highest_lock.view

    def __repr__(self) -> str:
        return f"TC_{self.view}(high={self.highest_view})"


def _dedupe_signers(items: Iterable[TimeoutMessage]) -> list[TimeoutMessage]:
    seen: dict[int, TimeoutMessage] = {}
    for t in items:
        seen.setdefault(t.signer, t)
    return sorted(seen.values(), key=lambda t: t.signer)


def form_timeout_certificate(timeouts: Iterable[TimeoutMessage], n: int,
                             f: int) -> Optional[TimeoutCertificate]:
    """Full-form TC; ``highest_lock`` is the max-view lock among the inputs.

    Raises ValueError when the timeouts disagree on their view. Returns None
    below quorum.
    """
    items = list(timeouts)
    views = {t.view for t in items}
    if len(views) > 1:
        raise ValueError(f"timeouts for several views: {sorted(views)}")
    uniq = _dedupe_signers(items)
    if len(uniq) < quorum_size(n, f):
        return None
    locks = [t.lock for t in uniq if t.lock is not None]
    if locks and len(locks) != len(uniq):
        raise ValueError("cannot mix lock-carrying and lock-free timeouts")
    highest = None
    for lk in locks:
        if highest is None or lk.view > highest.view:
            highest = lk
    return TimeoutCertificate(view=uniq[0].view, timeouts=tuple(uniq), highest_lock=highest)


def form_compact_tc(attestations: Iterable[TimeoutMessage], highest: BlockCertificate, n: int,
                    f: int, cert_ok: Optional[Callable[[BlockCertificate], bool]] = None
                    ) -> Optional[TimeoutCertificate]:
    """Compact TC from view-number attestations plus the full highest certificate.

    Returns None unless a quorum of distinct signers attests to one timeout
    view, no attested view exceeds ``highest.view``, one equals it, and
    ``highest`` itself is a valid certificate.
    """
    items = [t.attestation() if t.lock is not None else t for t in attestations]
    if not items or any(not t.compact or t.lock_view is None for t in items):
        return None
    if len({t.view for t in items}) != 1:
        return None
    uniq = _dedupe_signers(items)
    if len(uniq) < quorum_size(n, f):
        return None
    if not _compact_consistent(uniq, highest, quorum_size(n, f), cert_ok):
        return None
    return TimeoutCertificate(view=uniq[0].view, timeouts=tuple(uniq), highest_lock=highest)


def _compact_consistent(items: Sequence[TimeoutMessage], highest: Optional[BlockCertificate],
                        quorum: int, cert_ok) -> bool:
    if highest is None:
        return False
    attested = [t.lock_view for t in items]
    if max(attested) != highest.view:
        return False
    if not certificate_well_formed(highest, quorum):
        return False
    return cert_ok is None or cert_ok(highest)


def timeout_certificate_consistent(tc: TimeoutCertificate, quorum: int) -> bool:
    """Structural validity of a TC in any of its three forms (no signature checks)."""
    if len(tc.signers) < quorum or len(tc.signers) != len(tc.timeouts):
        return False
    if any(t.view != tc.view for t in tc.timeouts):
        return False
    if tc.compact:
        if any(not t.compact or t.lock_view is None for t in tc.timeouts):
            return False
        return _compact_consistent(tc.timeouts, tc.highest_lock, quorum, None)
    locks = [t.lock for t in tc.timeouts]
    if all(lk is None for lk in locks):
        return tc.highest_lock is None
    if any(lk is None or t.lock_view != lk.view for t, lk in zip(tc.timeouts, locks)):
        return False
    top = max(lk.view for lk in locks)
    return tc.highest_lock is not None and tc.highest_lock.view == top and any(
        lk is tc.highest_lock or lk == tc.highest_lock for lk in locks)


# ---------------------------------------------------------------------------
# chain storage


@dataclass(frozen=True)
class StatusMessage:
    view: int
    lock: BlockCertificate
    sender: int


@dataclass
class ChainStore:
    """Local block store with a parent-linked committed log.

    Blocks whose parent is unknown are parked and stored once the parent
    arrives, so every stored block has its full ancestry available.
    """

    genesis: Block = GENESIS
    blocks: dict[bytes, Block] = field(default_factory=dict)
    pending: dict[bytes, dict[bytes, Block]] = field(default_factory=dict)
    committed: list[bytes] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.blocks[self.genesis.hash] = self.genesis
        if not self.committed:
            self.committed.append(self.genesis.hash)
        self._committed_set = set(self.committed)

    def __contains__(self, h: bytes) -> bool:
        return h in self.blocks

    def get(self, h: bytes) -> Optional[Block]:
        return self.blocks.get(h)

    def __getitem__(self, h: bytes) -> Block:
        return self.blocks[h]

    @property
    def tip(self) -> Block:
        return self.blocks[self.committed[-1]]

    def is_committed(self, h: bytes) -> bool:
        return h in self._committed_set

    def insert(self, block: Block) -> tuple[str, list[Block]]:
        """Store ``block``; returns ("ok" | "pending" | "known", newly stored blocks)."""
        h = block.hash
        if h in self.blocks:
            return "known", []
        parent = self.blocks.get(block.parent)
        if parent is None:
            if block.height == 0:
                raise InvalidBlock("a second height-0 block")
            self.pending.setdefault(block.parent, {})[h] = block
            return "pending", []
        if block.height != parent.height + 1:
            raise InvalidBlock(f"height {block.height} on parent of height {parent.height}")
        added = [block]
        self.blocks[h] = block
        queue = [h]
        while queue:
            waiting = self.pending.pop(queue.pop(), None)
            if not waiting:
                continue
            for child in waiting.values():
                par = self.blocks[child.parent]
                if child.height != par.height + 1:
                    continue
                self.blocks[child.hash] = child
                added.append(child)
                queue.append(child.hash)
        return "ok", added

    def extends(self, descendant: bytes, ancestor: bytes) -> bool:
        """True iff ``ancestor`` is on ``descendant``'s parent chain (inclusive).

        Raises KeyError if either hash is not stored.
        """
        d = self.blocks[descendant]
        a = self.blocks[ancestor]
        while d.height > a.height:
            d = self.blocks[d.parent]
        return d.hash == a.hash

    def commit(self, h: bytes) -> list[Block]:
        """Commit ``h`` with its uncommitted ancestors; returns them ancestor-first."""
        if h in self._committed_set:
            return []
        chain = []
        b = self.blocks[h]
        while b.hash not in self._committed_set:
            chain.append(b)
            b = self.blocks[b.parent]
        if b.hash != self.committed[-1]:
            raise ChainConflict(f"{h.hex()[:8]} does not extend committed tip")
        chain.reverse()
        for blk in chain:
            self.committed.append(blk.hash)
            self._committed_set.add(blk.hash)
        return chain
