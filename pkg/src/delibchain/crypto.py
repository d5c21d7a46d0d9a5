"""Node identities and signed utterances.

An utterance's canonical bytes are, in order: deliberation id, round tag,
turn, agent id, body. Variable fields carry 4-byte big-endian length
prefixes. The digest is SHA-256 over the canonical bytes; the Ed25519
signature covers the same bytes and is appended last on the wire.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, replace

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .encoding import DecodeError, Reader, Writer

DIGEST_SIZE = 32
SIGNATURE_SIZE = 64


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def node_id_for(public_key: bytes) -> str:
    return digest(public_key).hex()


class IdentityMismatch(ValueError):
    pass


class Round(enum.IntEnum):
    INITIAL = 0
    REFLECTION = 1
    CONCLUSION = 2


class NodeIdentity:
    def __init__(self, private_key: Ed25519PrivateKey):
        self._key = private_key
        self.public_key = private_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self.node_id = node_id_for(self.public_key)

    @classmethod
    def from_name(cls, name: str) -> "NodeIdentity":
        """Deterministic keypair derived from a name; for simulation only."""
        seed = digest(b"delibchain-identity:" + name.encode("utf-8"))
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    def sign(self, data: bytes) -> bytes:
        return self._key.sign(data)

    def __repr__(self) -> str:
        return f"NodeIdentity({self.node_id[:12]})"


def verify_signature(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Utterance:
    deliberation_id: bytes
    round: Round
    turn: int
    agent: str
    body: str
    signature: bytes = b""
    digest: bytes = b""

    def canonical_bytes(self) -> bytes:
        return (
            Writer()
            .blob(self.deliberation_id)
            .u8(int(self.round))
            .u32(self.turn)
            .blob(bytes.fromhex(self.agent))
            .text(self.body)
            .getvalue()
        )

    def to_wire(self) -> bytes:
        return self.canonical_bytes() + Writer().blob(self.signature).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "Utterance":
        delib = r.blob()
        tag = r.u8()
        try:
            rnd = Round(tag)
        except ValueError as exc:
            raise DecodeError(f"bad round tag {tag}") from exc
        turn = r.u32()
        agent = r.blob().hex()
        body = r.text()
        sig = r.blob()
        u = cls(delib, rnd, turn, agent, body, sig)
        return replace(u, digest=digest(u.canonical_bytes()))

    @classmethod
    def from_wire(cls, data: bytes) -> "Utterance":
        r = Reader(data)
        u = cls.read(r)
        r.done()
        return u

    @property
    def sort_key(self) -> tuple:
        return (int(self.round), self.turn, self.agent)


def sign_utterance(identity: NodeIdentity, utterance: Utterance) -> Utterance:
    if utterance.agent != identity.node_id:
        raise IdentityMismatch(f"utterance agent {utterance.agent[:12]} is not {identity.node_id[:12]}")
    data = utterance.canonical_bytes()
    return replace(utterance, signature=identity.sign(data), digest=digest(data))


def verify_utterance(utterance: Utterance, public_key: bytes) -> bool:
    """Digest, signature and key-to-agent binding must all hold."""
    try:
        data = utterance.canonical_bytes()
    except (ValueError, TypeError, OverflowError, AttributeError, struct.error):
        return False
    return (
        node_id_for(public_key) == utterance.agent
        and utterance.digest == digest(data)
        and verify_signature(public_key, utterance.signature, data)
    )
