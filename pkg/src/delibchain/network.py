"""Two-phase gossip over a deterministic simulated transport.

Phase one broadcasts 32-byte digests; phase two pulls full utterances only
from peers that announced them. Nodes re-announce what they ingest, skipping
peers that the sender's own announcement already covered (the topology is
known to every node), so a fully connected network needs no relaying at all.
"""

from __future__ import annotations

import heapq
import itertools
import json
import random
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Union

from . import ledger
from .crypto import (
    DIGEST_SIZE,
    IdentityMismatch,
    NodeIdentity,
    Round,
    Utterance,
    sign_utterance,
    verify_utterance,
)

__all__ = [
    "Announce", "Request", "Data", "BlockAnnounce", "BlockData", "GossipMessage",
    "SimTransport", "Node", "Network", "run_transport", "wire_size",
    "NodeIdentity", "Utterance", "Round", "IdentityMismatch", "sign_utterance", "verify_utterance",
]


@dataclass(frozen=True)
class Announce:
    digests: tuple[bytes, ...]


@dataclass(frozen=True)
class Request:
    digests: tuple[bytes, ...]


@dataclass(frozen=True)
class Data:
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class BlockAnnounce:
    digest: bytes


@dataclass(frozen=True)
class BlockData:
    block: bytes


GossipMessage = Union[Announce, Request, Data, BlockAnnounce, BlockData]


def wire_size(msg: GossipMessage) -> int:
    """Bytes the message occupies on the wire: a 1-byte tag plus payload."""
    if isinstance(msg, (Announce, Request)):
        return 1 + 4 + DIGEST_SIZE * len(msg.digests)
    if isinstance(msg, Data):
        return 1 + 4 + sum(4 + len(u.to_wire()) for u in msg.utterances)
    if isinstance(msg, BlockAnnounce):
        return 1 + DIGEST_SIZE
    return 1 + 4 + len(msg.block)


class SimTransport:
    """Single-threaded discrete-event message queue keyed by logical time.

    Ties in delivery time are broken by enqueue order. Every send draws a
    latency and a drop decision from the seeded RNG, so one seed fixes the
    entire schedule.
    """

    def __init__(self, seed: int = 0, latency: tuple[int, int] = (1, 1), drop: float = 0.0, link_latency=None):
        if not 0.0 <= drop <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        self.clock = 0
        self.latency = latency
        self.link_latency = dict(link_latency or {})
        self.drop = drop
        self.rng = random.Random(seed)
        self.nodes: dict[str, "Node"] = {}
        self.log: list[dict] = []
        self.bytes_sent: Counter = Counter()
        self.delivered = 0
        self._queue: list = []
        self._seq = itertools.count()

    def register(self, node: "Node") -> None:
        self.nodes[node.node_id] = node

    def send(self, src: str, dst: str, msg: GossipMessage) -> None:
        lo, hi = self.link_latency.get((src, dst), self.latency)
        delay = self.rng.randint(lo, hi)
        dropped = self.rng.random() < self.drop
        kind = type(msg).__name__
        size = wire_size(msg)
        self.bytes_sent[kind] += size
        self.log.append({"t": self.clock, "ev": "drop" if dropped else "send", "src": src[:12],
                         "dst": dst[:12], "kind": kind, "size": size})
        if not dropped:
            heapq.heappush(self._queue, (self.clock + delay, next(self._seq), src, dst, msg))

    def set_timer(self, node_id: str, delay: int, payload) -> None:
        heapq.heappush(self._queue, (self.clock + delay, next(self._seq), None, node_id, payload))

    @property
    def idle(self) -> bool:
        return not self._queue

    def run(self, until: int | None = None) -> int:
        """Deliver queued events in time order; returns how many were messages."""
        count = 0
        while self._queue and (until is None or self._queue[0][0] <= until):
            t, _, src, dst, item = heapq.heappop(self._queue)
            self.clock = max(self.clock, t)
            node = self.nodes[dst]
            if src is None:
                node.on_timer(item)
                continue
            self.log.append({"t": self.clock, "ev": "deliver", "src": src[:12], "dst": dst[:12],
                             "kind": type(item).__name__})
            count += 1
            node.receive(src, item)
        if until is not None:
            self.clock = max(self.clock, until)
        self.delivered += count
        return count

    def advance(self, ticks: int) -> int:
        return self.run(until=self.clock + ticks)

    def export_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_transport(transport: SimTransport, until: int | None = None) -> int:
    return transport.run(until)


class Node:
    """One participant: an utterance store, a gossip endpoint and a local chain."""

    def __init__(
        self,
        identity: NodeIdentity,
        transport: SimTransport,
        keyring: dict[str, bytes],
        topology: dict[str, frozenset],
        retry_delay: int = 10,
    ):
        self.identity = identity
        self.node_id = identity.node_id
        self.transport = transport
        self.keyring = keyring
        self.topology = topology
        self.retry_delay = retry_delay
        self.store: dict[bytes, Utterance] = {}
        self.rejected = 0
        self.rejected_blocks = 0
        self.chain = ledger.Chain()
        self.blocks: dict[bytes, ledger.Block] = {}
        self.candidate: ledger.Block | None = None
        self._pending: dict[bytes, int] = {}
        self._source: dict[bytes, str] = {}
        transport.register(self)

    @property
    def peers(self) -> frozenset:
        return self.topology.get(self.node_id, frozenset())

    def _targets(self, source: str | None) -> list[str]:
        if source is None:
            return sorted(self.peers)
        covered = self.topology.get(source, frozenset()) | {source}
        return sorted(self.peers - covered)

    def send(self, dst: str, msg: GossipMessage) -> None:
        self.transport.send(self.node_id, dst, msg)

    # -- utterances --------------------------------------------------------

    def publish(self, utterance: Utterance) -> None:
        if utterance.agent != self.node_id:
            raise IdentityMismatch("nodes only publish their own utterances")
        self.store[utterance.digest] = utterance
        self.announce([utterance.digest])

    def announce(self, digests: Iterable[bytes], source: str | None = None) -> int:
        digests = tuple(dict.fromkeys(digests))
        unknown = [d for d in digests if d not in self.store]
        if unknown:
            raise KeyError(f"cannot announce {len(unknown)} digests without their data")
        if not digests:
            return 0
        targets = self._targets(source)
        for peer in targets:
            self.send(peer, Announce(digests))
        return len(targets)

    def handle_announce(self, sender: str, msg: Announce) -> Request | None:
        """Request announced digests that are neither held nor already in flight."""
        wanted = tuple(d for d in dict.fromkeys(msg.digests) if d not in self.store and d not in self._pending)
        if not wanted:
            return None
        for d in wanted:
            self._pending[d] = 0
        req = Request(wanted)
        self.send(sender, req)
        self.transport.set_timer(self.node_id, self.retry_delay, ("retry", sender, wanted))
        return req

    def serve_request(self, msg: Request) -> Data:
        return Data(tuple(self.store[d] for d in msg.digests if d in self.store))

    def ingest_data(self, sender: str, msg: Data) -> list[Utterance]:
        accepted = []
        for u in msg.utterances:
            key = self.keyring.get(getattr(u, "agent", None))
            if key is None or not verify_utterance(u, key):
                self.rejected += 1
                continue
            if u.digest in self.store:
                continue
            self.store[u.digest] = u
            self._pending.pop(u.digest, None)
            self._source[u.digest] = sender
            accepted.append(u)
        if accepted:
            self.announce([u.digest for u in accepted], source=sender)
        return accepted

    def on_timer(self, payload) -> None:
        _, peer, digests = payload
        missing = tuple(d for d in digests if d not in self.store and d in self._pending)
        retry = tuple(d for d in missing if self._pending[d] == 0)
        for d in missing:
            if self._pending[d] > 0:
                del self._pending[d]
        if retry:
            for d in retry:
                self._pending[d] = 1
            self.send(peer, Request(retry))
            self.transport.set_timer(self.node_id, self.retry_delay, ("retry", peer, retry))

    def utterances(self, deliberation_id: bytes, round_: Round | None = None, turn: int | None = None) -> list[Utterance]:
        return sorted(
            (u for u in self.store.values()
             if u.deliberation_id == deliberation_id
             and (round_ is None or u.round == round_)
             and (turn is None or u.turn == turn)),
            key=lambda u: u.sort_key,
        )

    # -- blocks -----------------------------------------------------------------

    def commit(self, block: ledger.Block, source: str | None = None) -> bool:
        """Verify and append; announces the block onward on success."""
        if block.hash in self.blocks:
            return False
        try:
            ledger.verify_and_append(self.chain, block)
        except ledger.BlockRejected:
            self.rejected_blocks += 1
            return False
        self.blocks[block.hash] = block
        for peer in self._targets(source):
            self.send(peer, BlockAnnounce(block.hash))
        return True

    def _handle_block_announce(self, sender: str, msg: BlockAnnounce) -> None:
        if msg.digest in self.blocks:
            return
        if self.candidate is not None and self.candidate.hash == msg.digest:
            self.commit(self.candidate, source=sender)
        else:
            self.send(sender, Request((msg.digest,)))

    def receive(self, sender: str, msg: GossipMessage) -> None:
        if isinstance(msg, Announce):
            self.handle_announce(sender, msg)
        elif isinstance(msg, Request):
            blocks = [d for d in msg.digests if d in self.blocks]
            for d in blocks:
                self.send(sender, BlockData(self.blocks[d].to_bytes()))
            rest = Request(tuple(d for d in msg.digests if d not in self.blocks))
            if rest.digests:
                self.send(sender, self.serve_request(rest))
        elif isinstance(msg, Data):
            self.ingest_data(sender, msg)
        elif isinstance(msg, BlockAnnounce):
            self._handle_block_announce(sender, msg)
        elif isinstance(msg, BlockData):
            try:
                block = ledger.deserialize_block(msg.block)
            except (ValueError, ledger.OversizeBlock):
                self.rejected_blocks += 1
                return
            self.commit(block, source=sender)


def full_topology(ids: Iterable[str]) -> dict[str, frozenset]:
    ids = list(ids)
    return {a: frozenset(b for b in ids if b != a) for a in ids}


def topology_from_edges(ids: Iterable[str], edges: Iterable[tuple[str, str]]) -> dict[str, frozenset]:
    adj: dict[str, set] = {a: set() for a in ids}
    for a, b in edges:
        if a == b:
            continue
        adj[a].add(b)
        adj[b].add(a)
    return {a: frozenset(s) for a, s in adj.items()}


class Network:
    """Nodes for a fixed set of identities wired onto one transport."""

    def __init__(
        self,
        identities: list[NodeIdentity],
        seed: int = 0,
        latency: tuple[int, int] = (1, 1),
        drop: float = 0.0,
        topology: dict[str, frozenset] | None = None,
        retry_delay: int = 10,
        link_latency=None,
    ):
        self.transport = SimTransport(seed, latency, drop, link_latency)
        ids = [i.node_id for i in identities]
        self.topology = topology if topology is not None else full_topology(ids)
        self.keyring = {i.node_id: i.public_key for i in identities}
        self.nodes = {
            i.node_id: Node(i, self.transport, self.keyring, self.topology, retry_delay) for i in identities
        }

    def __getitem__(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def quiesce(self) -> int:
        return self.transport.run()

    def holds_all(self, digests: Iterable[bytes]) -> bool:
        digests = list(digests)
        return all(d in n.store for n in self.nodes.values() for d in digests)

    @property
    def clock(self) -> int:
        return self.transport.clock

    def bytes_by_kind(self) -> Counter:
        return Counter(self.transport.bytes_sent)

    def each(self, fn: Callable[[Node], None]) -> None:
        for node_id in sorted(self.nodes):
            fn(self.nodes[node_id])
