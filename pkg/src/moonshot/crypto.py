"""Signature and hash providers.

``MockScheme`` is a keyed-hash tag (blake2b) used by the simulator: cheap,
deterministic, and unforgeable by the simulated adversary, which never
forges. ``Ed25519Scheme`` uses real signatures and is what the socket
runner uses.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Sequence

from .core import digest


def hash_bytes(data: bytes) -> bytes:
    """32-byte SHA-256 digest, in every mode."""
    return digest(data)


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes
    owner: int


class MockScheme:
    """Keyed-hash tags; the verification key equals the signing key."""

    name = "mock"
    tag_size = 16

    def keygen(self, seed: int, owner: int) -> KeyPair:
        secret = hashlib.blake2b(f"mock-key:{seed}:{owner}".encode(), digest_size=32).digest()
        return KeyPair(public=secret, secret=secret, owner=owner)

    def sign(self, secret: bytes, message: bytes) -> bytes:
        return hashlib.blake2b(message, key=secret, digest_size=self.tag_size).digest()

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(public, message), signature)


class Ed25519Scheme:
    name = "ed25519"

    def keygen(self, seed: int, owner: int) -> KeyPair:
        from cryptography.hazmat.primitives import serialization
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        raw = hashlib.sha256(f"ed25519-key:{seed}:{owner}".encode()).digest()
        sk = Ed25519PrivateKey.from_private_bytes(raw)
        pk = sk.public_key().public_bytes(serialization.Encoding.Raw,
                                          serialization.PublicFormat.Raw)
        return KeyPair(public=pk, secret=raw, owner=owner)

    def sign(self, secret: bytes, message: bytes) -> bytes:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        return Ed25519PrivateKey.from_private_bytes(secret).sign(message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


SCHEMES = {"mock": MockScheme, "ed25519": Ed25519Scheme}


def get_scheme(name: str):
    try:
        return SCHEMES[name]()
    except KeyError:
        raise ValueError(f"unknown signature scheme {name!r}") from None


class Keyring:
    """Public keys of all nodes plus a verification memo.

    The memo is keyed by (signer, signature) and remembers the exact message
    bytes that verified, so a hit is only a hit for identical inputs.
    """

    def __init__(self, scheme, publics: Sequence[bytes]) -> None:
        self.scheme = scheme
        self.publics = list(publics)
        self._ok: dict[tuple[int, bytes], bytes] = {}
        self._ok_certs: set[bytes] = set()

    @classmethod
    def generate(cls, scheme, seed: int, n: int) -> tuple["Keyring", list[KeyPair]]:
        pairs = [scheme.keygen(seed, i) for i in range(n)]
        return cls(scheme, [p.public for p in pairs]), pairs

    def verify(self, signer: int, message: bytes, signature: bytes) -> bool:
        if not 0 <= signer < len(self.publics):
            return False
        key = (signer, signature)
        if self._ok.get(key) == message:
            return True
        if self.scheme.verify(self.publics[signer], message, signature):
            self._ok[key] = message
            return True
        return False

    def cert_known_valid(self, cert_digest: bytes) -> bool:
        return cert_digest in self._ok_certs

    def mark_cert_valid(self, cert_digest: bytes) -> None:
        self._ok_certs.add(cert_digest)
