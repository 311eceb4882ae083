"""Commit Moonshot: Pipelined Moonshot plus an explicit pre-commit phase.

A node that sees C_v while still in view v (and has not timed out in v)
multicasts a commit vote; a quorum of commit votes for a block commits it
directly, whatever view the receiver is in. The two-chain rule is off.
"""

from __future__ import annotations

from .core import BlockCertificate, Vote, VoteKind
from .messages import VoteMsg
from .pipelined import PipelinedMoonshot


class CommitMoonshot(PipelinedMoonshot):
    protocol = "commit"
    vote_kinds = PipelinedMoonshot.vote_kinds | {VoteKind.COMMIT}

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.commit_voted: set[int] = set()
        self.commit_pools: dict[tuple[int, bytes], set[int]] = {}
        self._commit_done: set[tuple[int, bytes]] = set()

    def before_advance(self, cert: BlockCertificate) -> None:
        v = self.view
        if cert.view == v and self.timeout_view < v and v not in self.commit_voted:
            self.commit_voted.add(v)
            self.multicast(VoteMsg(self.make_vote(VoteKind.COMMIT, cert.block_hash, v)))
            self.record("vote", "COMMIT", v, cert.block_hash.hex())

    def after_certificate(self, cert: BlockCertificate) -> None:
        pass

    def on_commit_vote(self, vote: Vote) -> None:
        key = (vote.view, vote.block_hash)
        if key in self._commit_done:
            return
        pool = self.commit_pools.setdefault(key, set())
        pool.add(vote.signer)
        if len(pool) >= self.quorum:
            self._commit_done.add(key)
            del self.commit_pools[key]
            self.record("cert", "COMMIT", vote.view, vote.block_hash.hex())
            self.commit(vote.block_hash)
