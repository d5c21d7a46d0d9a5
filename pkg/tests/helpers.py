"""Shared builders for the test suite."""

import random
from dataclasses import replace

from delibchain.crypto import NodeIdentity, Round, Utterance, sign_utterance
from delibchain.network import Data, Network

DELIB = b"\x11" * 32


def identities(n, prefix="node"):
    return [NodeIdentity.from_name(f"{prefix}-{i}") for i in range(n)]


def signed(identity, body, turn=0, delib=DELIB):
    rnd = Round.INITIAL if turn == 0 else Round.REFLECTION
    return sign_utterance(identity, Utterance(delib, rnd, turn, identity.node_id, body))


def mutate_wire(data: bytes, rng: random.Random) -> bytes:
    """One random byte-level mutation: flip, insert, delete or truncate."""
    buf = bytearray(data)
    op = rng.randrange(4)
    pos = rng.randrange(len(buf))
    if op == 0:
        buf[pos] ^= 1 << rng.randrange(8)
    elif op == 1:
        buf.insert(pos, rng.randrange(256))
    elif op == 2:
        del buf[pos]
    else:
        del buf[pos:]
    return bytes(buf)


def mutate_utterance(u: Utterance, rng: random.Random) -> Utterance:
    """A structurally valid utterance with one field tampered, signature kept."""
    field = rng.randrange(5)
    if field == 0:
        return replace(u, body=u.body + rng.choice("xyz"))
    if field == 1:
        return replace(u, turn=u.turn + 1 + rng.randrange(3))
    if field == 2:
        sig = bytearray(u.signature)
        sig[rng.randrange(len(sig))] ^= 1 << rng.randrange(8)
        return replace(u, signature=bytes(sig))
    if field == 3:
        return replace(u, deliberation_id=bytes(32))
    return replace(u, digest=bytes(32))


def fuzz_node_acceptance(node, honest: Utterance, mutations: int, seed: int) -> int:
    """Feed mutated copies of ``honest`` to ``node``; count accepted invalid utterances."""
    from delibchain.crypto import verify_utterance
    from delibchain.encoding import DecodeError

    rng = random.Random(seed)
    bad = 0
    key = node.keyring[honest.agent]
    wire = honest.to_wire()
    for i in range(mutations):
        if i % 2:
            try:
                candidate = Utterance.from_wire(mutate_wire(wire, rng))
            except (DecodeError, ValueError, UnicodeDecodeError):
                continue
        else:
            candidate = mutate_utterance(honest, rng)
        before = set(node.store)
        node.ingest_data("fuzzer", Data((candidate,)))
        for d in set(node.store) - before:
            u = node.store.pop(d)
            if not verify_utterance(u, key) or u.to_wire() != honest.to_wire():
                bad += 1
    return bad


def network_with(n, **kw):
    ids = identities(n)
    return ids, Network(ids, **kw)


def padded(value, size, tag=""):
    """A response of exactly ``size`` UTF-8 bytes ending in an answer line."""
    tail = f"\nANSWER: {value}"
    head = f"{tag} reasoning "
    return (head + "x" * size)[: size - len(tail)] + tail


def disagreeing_scripts(n, turns, size):
    """Scripted agents that disagree until the last turn, then agree on 42."""
    from delibchain.agent import Scripted
    from delibchain.engine import AgentSpec

    specs = []
    for i in range(n):
        bodies = [padded(i if t < turns else 42, size, f"a{i}t{t}") for t in range(turns + 1)]
        specs.append(AgentSpec(f"agent-{i}", Scripted(tuple(bodies))))
    return specs
