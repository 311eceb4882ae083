"""Small builders shared by the unit tests."""

from moonshot.core import (BlockCertificate, TimeoutMessage, Vote, VoteKind,
                           form_block_certificate, timeout_signing_bytes, vote_signing_bytes)
from moonshot.crypto import Keyring, MockScheme
from moonshot.engine import Deliver, Multicast, NodeConfig, Start, Unicast
from moonshot.simnet import PROTOCOLS


class Net:
    """A keyring for n nodes plus helpers to forge honest-looking messages."""

    def __init__(self, n=4, seed=0, leaders=None, compact=False, delta=1.0):
        self.n = n
        self.f = (n - 1) // 3
        self.keyring, self.pairs = Keyring.generate(MockScheme(), seed, n)
        self.cfg = NodeConfig(n=n, f=self.f, delta=delta,
                              leaders=tuple(leaders if leaders is not None else range(n)),
                              compact_tc=compact)

    def node(self, protocol, me):
        return PROTOCOLS[protocol](me, self.cfg, self.keyring, self.pairs[me].secret)

    def vote(self, signer, kind, block_hash, view):
        sig = self.keyring.scheme.sign(self.pairs[signer].secret,
                                       vote_signing_bytes(kind, block_hash, view))
        return Vote(kind=kind, block_hash=block_hash, view=view, signer=signer, signature=sig)

    def cert(self, block_hash, view, kind=VoteKind.SIMPLE, signers=None):
        signers = signers if signers is not None else range(self.n - self.f)
        c = form_block_certificate([self.vote(s, kind, block_hash, view) for s in signers],
                                   self.n, self.f)
        assert isinstance(c, BlockCertificate)
        return c

    def timeout(self, signer, view, lock=None, compact=False):
        lock_view = None if lock is None else lock.view
        lock_hash = None if lock is None else lock.block_hash
        sig = self.keyring.scheme.sign(self.pairs[signer].secret,
                                       timeout_signing_bytes(view, lock_view, lock_hash, compact))
        return TimeoutMessage(view=view, signer=signer, signature=sig, lock=lock,
                              lock_view=lock_view, compact=compact)


def deliver(node, msg, sender, at=0.0):
    return node.step(Deliver(msg, sender, at))


def start(node):
    return node.step(Start(0.0))


def sent(actions, cls=None):
    """Messages in Multicast/Unicast actions, optionally of one type."""
    out = []
    for a in actions:
        if isinstance(a, (Multicast, Unicast)) and (cls is None or isinstance(a.message, cls)):
            out.append(a.message)
    return out


def records(actions, label):
    return [a.fields for a in actions if getattr(a, "label", None) == label]
