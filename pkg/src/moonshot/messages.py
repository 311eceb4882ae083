"""Wire-level messages exchanged by Moonshot nodes.

Proposals and status messages travel over authenticated channels and are
not signed themselves; votes and timeouts carry their signer's signature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .core import Block, BlockCertificate, TimeoutCertificate, TimeoutMessage, Vote


@dataclass(frozen=True)
class OptPropose:
    block: Block
    view: int
    kind = "opt-propose"


@dataclass(frozen=True)
class Propose:
    block: Block
    cert: BlockCertificate
    view: int
    kind = "propose"


@dataclass(frozen=True)
class FbPropose:
    block: Block
    cert: BlockCertificate
    tc: TimeoutCertificate
    view: int
    kind = "fb-propose"


@dataclass(frozen=True)
class VoteMsg:
    vote: Vote
    kind = "vote"

    @property
    def view(self) -> int:
        return self.vote.view


@dataclass(frozen=True)
class TimeoutMsg:
    timeout: TimeoutMessage
    kind = "timeout"

    @property
    def view(self) -> int:
        return self.timeout.view


@dataclass(frozen=True)
class CertMsg:
    cert: BlockCertificate
    kind = "cert-forward"

    @property
    def view(self) -> int:
        return self.cert.view


@dataclass(frozen=True)
class TCMsg:
    tc: TimeoutCertificate
    kind = "tc-forward"

    @property
    def view(self) -> int:
        return self.tc.view


@dataclass(frozen=True)
class Status:
    view: int
    lock: BlockCertificate
    kind = "status"


@dataclass(frozen=True)
class BlockRequest:
    block_hash: bytes
    kind = "block-request"
    view = 0


@dataclass(frozen=True)
class BlockResponse:
    block: Block
    kind = "block-response"

    @property
    def view(self) -> int:
        return self.block.view


Message = Union[OptPropose, Propose, FbPropose, VoteMsg, TimeoutMsg, CertMsg, TCMsg, Status,
                BlockRequest, BlockResponse]

PROPOSALS = (OptPropose, Propose, FbPropose)

# message kind → one-byte wire tag
TAGS: dict[type, int] = {
    OptPropose: 1,
    Propose: 2,
    FbPropose: 3,
    VoteMsg: 4,
    TimeoutMsg: 5,
    CertMsg: 6,
    TCMsg: 7,
    Status: 8,
    BlockRequest: 9,
    BlockResponse: 10,
}


def message_kind(msg: Message) -> str:
    """Trace label; votes are labelled by their vote kind."""
    if isinstance(msg, VoteMsg):
        return msg.vote.kind.label if msg.vote.kind.name != "COMMIT" else "commit-vote"
    return msg.kind


def embedded_block(msg: Message) -> Optional[Block]:
    if isinstance(msg, (OptPropose, Propose, FbPropose, BlockResponse)):
        return msg.block
    return None
