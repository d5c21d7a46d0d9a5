"""Blocks, canonical serialization, chain verification and the chain file.

Block layout::

    header  height u64 | prev hash 32 | timestamp u64 | body digest 32 | outcome u8
    body    u32 length | record | u32 count | (u32 length | utterance wire bytes)*

The whole encoded block may not exceed ``MAX_BLOCK_SIZE`` bytes. A chain file
is a sequence of ``[u32 length][block bytes]`` frames.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .agent import extract_action
from .core import (
    ABSTAIN,
    Action,
    ConsensusStatus,
    DefinitiveAction,
    DeliberationRecord,
    HungReason,
    Outcome,
    PrioritizedAction,
    Problem,
    ProblemKind,
    abstention,
    compute_payoff,
    decision_of,
    final_decision,
)
from .crypto import DIGEST_SIZE, Round, Utterance, digest, node_id_for, verify_utterance
from .encoding import DecodeError, Reader, Writer

MAX_BLOCK_SIZE = 102_400
ZERO_HASH = bytes(DIGEST_SIZE)
HEADER_SIZE = 8 + DIGEST_SIZE + 8 + DIGEST_SIZE + 1


class OversizeBlock(ValueError):
    def __init__(self, size: int):
        super().__init__(f"block is {size} bytes, limit is {MAX_BLOCK_SIZE}")
        self.size = size


class WrongOutcome(ValueError):
    pass


class InvalidTranscript(ValueError):
    pass


class RejectReason(enum.Enum):
    HEIGHT = "height"
    LINKAGE = "linkage"
    DIGEST = "digest"
    OVERSIZE = "oversize"
    MALFORMED = "malformed"
    SIGNATURE = "signature"
    TRANSCRIPT_MISMATCH = "transcript_mismatch"
    CONSENSUS_MISMATCH = "consensus_mismatch"
    PAYOFF_MISMATCH = "payoff_mismatch"


class BlockRejected(Exception):
    def __init__(self, reason: RejectReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class VerificationFailed(Exception):
    def __init__(self, height: int, reason: str):
        super().__init__(f"chain invalid at height {height}: {reason}")
        self.height = height
        self.reason = reason


def _outcome_tag(outcome: Outcome) -> int:
    return 0 if outcome.success else outcome.hung_reason.value


def _outcome_from_tag(tag: int) -> Outcome:
    if tag == 0:
        return Outcome()
    try:
        return Outcome(HungReason(tag))
    except ValueError as exc:
        raise DecodeError(f"bad outcome tag {tag}") from exc


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    timestamp: int
    body_digest: bytes
    outcome: int

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .u64(self.height)
            .fixed(self.prev_hash, DIGEST_SIZE)
            .u64(self.timestamp)
            .fixed(self.body_digest, DIGEST_SIZE)
            .u8(self.outcome)
            .getvalue()
        )

    @classmethod
    def read(cls, r: Reader) -> "BlockHeader":
        return cls(r.u64(), r.fixed(DIGEST_SIZE), r.u64(), r.fixed(DIGEST_SIZE), r.u8())

    @property
    def hash(self) -> bytes:
        return digest(self.to_bytes())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    record: DeliberationRecord = field(compare=False)
    transcript: tuple[Utterance, ...] = field(default=(), compare=False)
    body: bytes = field(default=b"", repr=False)

    @property
    def hash(self) -> bytes:
        return self.header.hash

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def outcome(self) -> Outcome:
        return self.record.outcome

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + Writer().blob(self.body).getvalue()

    @property
    def size(self) -> int:
        return HEADER_SIZE + 4 + len(self.body)


# -- record encoding ----------------------------------------------------------


def _write_fraction(w: Writer, f: Fraction) -> None:
    w.u64(f.numerator).u64(f.denominator)


def _read_fraction(r: Reader) -> Fraction:
    num, den = r.u64(), r.u64()
    if den == 0:
        raise DecodeError("zero denominator")
    return Fraction(num, den)


def _write_action(w: Writer, action: Action) -> None:
    if isinstance(action, PrioritizedAction):
        w.u8(2).u32(len(action.policies))
        for p in action.policies:
            w.text(p)
    elif action.abstains:
        w.u8(0).text(action.argument)
    else:
        w.u8(1).text(action.value).text(action.argument)


def _read_action(r: Reader) -> Action:
    tag = r.u8()
    if tag == 0:
        return DefinitiveAction(ABSTAIN, r.text())
    if tag == 1:
        value = r.text()
        return DefinitiveAction(value, r.text())
    if tag == 2:
        return PrioritizedAction(tuple(r.text() for _ in range(r.u32())))
    raise DecodeError(f"bad action tag {tag}")


def encode_body(record: DeliberationRecord, transcript=()) -> bytes:
    w = Writer()
    w.fixed(record.deliberation_id, DIGEST_SIZE)
    p = record.problem
    w.text(p.id).text(p.statement).u8(p.kind.value)
    w.u8(p.ground_truth is not None).text(p.ground_truth or "")
    _write_fraction(w, record.theta)
    w.u32(record.min_participants).u64(record.timeout)
    w.u32(len(record.agents))
    for a in record.agents:
        w.fixed(bytes.fromhex(a), DIGEST_SIZE).fixed(record.agent_keys[a], 32)
    w.u32(len(record.actions_by_round))
    for actions in record.actions_by_round:
        for a in record.agents:
            _write_action(w, actions[a])
    for a in record.agents:
        _write_fraction(w, record.payoff[a])
    _write_fraction(w, record.confidence)
    w.u64(record.completed_at).u8(_outcome_tag(record.outcome))
    w.u32(len(transcript))
    for u in transcript:
        w.blob(u.to_wire())
    return w.getvalue()


def decode_body(body: bytes) -> tuple[DeliberationRecord, tuple[Utterance, ...]]:
    r = Reader(body)
    delib = r.fixed(DIGEST_SIZE)
    pid, statement, kind_tag = r.text(), r.text(), r.u8()
    try:
        kind = ProblemKind(kind_tag)
    except ValueError as exc:
        raise DecodeError(f"bad problem kind {kind_tag}") from exc
    has_truth, truth = r.u8(), r.text()
    try:
        problem = Problem(pid, statement, kind, truth if has_truth else None)
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc
    theta = _read_fraction(r)
    min_participants, timeout = r.u32(), r.u64()
    agents, keys = [], {}
    for _ in range(r.u32()):
        a = r.fixed(DIGEST_SIZE).hex()
        agents.append(a)
        keys[a] = r.fixed(32)
    rounds = [{a: _read_action(r) for a in agents} for _ in range(r.u32())]
    payoff = {a: _read_fraction(r) for a in agents}
    confidence = _read_fraction(r)
    completed_at = r.u64()
    outcome = _outcome_from_tag(r.u8())
    transcript = []
    for _ in range(r.u32()):
        frame = Reader(r.blob())
        transcript.append(Utterance.read(frame))
        frame.done()
    r.done()
    record = DeliberationRecord(
        delib, problem, agents, rounds, payoff, confidence, completed_at, outcome,
        theta=theta, min_participants=min_participants, timeout=timeout, agent_keys=keys,
    )
    return record, tuple(transcript)


# -- construction ---------------------------------------------------------------


def _assemble(record: DeliberationRecord, transcript, prev: Block | None, timestamp: int) -> Block:
    body = encode_body(record, transcript)
    header = BlockHeader(
        height=1 if prev is None else prev.height + 1,
        prev_hash=ZERO_HASH if prev is None else prev.hash,
        timestamp=timestamp,
        body_digest=digest(body),
        outcome=_outcome_tag(record.outcome),
    )
    block = Block(header, record, tuple(transcript), body)
    if block.size > MAX_BLOCK_SIZE:
        raise OversizeBlock(block.size)
    return block


def transcript_order(record: DeliberationRecord):
    rank = {a: i for i, a in enumerate(record.agents)}
    return lambda u: (int(u.round), u.turn, rank.get(u.agent, len(rank)))


def build_block(record: DeliberationRecord, transcript, prev: Block | None, timestamp: int | None = None) -> Block:
    if not record.outcome.success:
        raise WrongOutcome("hung deliberations produce empty blocks")
    transcript = tuple(transcript)
    for u in transcript:
        key = record.agent_keys.get(u.agent)
        if key is None or not verify_utterance(u, key):
            raise InvalidTranscript(f"utterance {u.digest.hex()[:12]} does not verify")
    if list(transcript) != sorted(transcript, key=transcript_order(record)):
        raise InvalidTranscript("transcript is not in (round, turn, agent) order")
    return _assemble(record, transcript, prev, record.completed_at if timestamp is None else timestamp)


def build_empty_block(record: DeliberationRecord, prev: Block | None, timestamp: int | None = None) -> Block:
    if record.outcome.success:
        raise WrongOutcome("successful deliberations produce full blocks")
    return _assemble(record, (), prev, record.completed_at if timestamp is None else timestamp)


def canonical_serialize(block: Block) -> bytes:
    if block.size > MAX_BLOCK_SIZE:
        raise OversizeBlock(block.size)
    return block.to_bytes()


def deserialize_block(data: bytes) -> Block:
    if len(data) > MAX_BLOCK_SIZE:
        raise OversizeBlock(len(data))
    r = Reader(data)
    header = BlockHeader.read(r)
    body = r.blob()
    r.done()
    record, transcript = decode_body(body)
    if encode_body(record, transcript) != body:
        raise DecodeError("body is not in canonical form")
    return Block(header, record, transcript, body)


# -- verification ---------------------------------------------------------------


def _expected_actions(record: DeliberationRecord, transcript) -> list[dict[str, Action]]:
    kind = record.problem.kind
    turns = [0 if u.round is Round.INITIAL else u.turn for u in transcript]
    rounds = max(turns) + 1 if turns else 0
    expected = [{a: abstention(kind) for a in record.agents} for _ in range(rounds)]
    for u, t in zip(transcript, turns):
        expected[t][u.agent] = decision_of(extract_action(u.body, kind))
    return expected


def verify_block(block: Block, height: int, prev_hash: bytes) -> None:
    """Raise :class:`BlockRejected` unless ``block`` may follow ``prev_hash`` at ``height``."""
    h, rec = block.header, block.record
    if h.height != height:
        raise BlockRejected(RejectReason.HEIGHT, f"expected {height}, got {h.height}")
    if h.prev_hash != prev_hash:
        raise BlockRejected(RejectReason.LINKAGE, "previous hash does not match chain tip")
    if block.size > MAX_BLOCK_SIZE:
        raise BlockRejected(RejectReason.OVERSIZE, f"{block.size} bytes")
    if h.body_digest != digest(block.body) or encode_body(rec, block.transcript) != block.body:
        raise BlockRejected(RejectReason.DIGEST, "body digest mismatch")
    if h.outcome != _outcome_tag(rec.outcome):
        raise BlockRejected(RejectReason.MALFORMED, "header outcome disagrees with record")
    if any(node_id_for(rec.agent_keys[a]) != a for a in rec.agents):
        raise BlockRejected(RejectReason.MALFORMED, "agent key does not hash to agent id")
    if rec.payoff != compute_payoff(rec):
        raise BlockRejected(RejectReason.PAYOFF_MISMATCH)
    if not rec.outcome.success:
        if block.transcript:
            raise BlockRejected(RejectReason.MALFORMED, "hung block carries a transcript")
        return

    seen = set()
    for u in block.transcript:
        key = rec.agent_keys.get(u.agent)
        if u.deliberation_id != rec.deliberation_id or key is None or not verify_utterance(u, key):
            raise BlockRejected(RejectReason.SIGNATURE, f"utterance {u.digest.hex()[:12]}")
        slot = (u.round, u.turn, u.agent)
        if slot in seen:
            raise BlockRejected(RejectReason.TRANSCRIPT_MISMATCH, "duplicate utterance slot")
        seen.add(slot)
    if list(block.transcript) != sorted(block.transcript, key=transcript_order(rec)):
        raise BlockRejected(RejectReason.TRANSCRIPT_MISMATCH, "transcript out of order")
    if _expected_actions(rec, block.transcript) != rec.actions_by_round:
        raise BlockRejected(RejectReason.TRANSCRIPT_MISMATCH, "recorded actions differ from transcript")

    if rec.timeout and rec.completed_at > rec.timeout:
        raise BlockRejected(RejectReason.CONSENSUS_MISMATCH, "completed after the timeout")
    last = rec.actions_by_round[-1] if rec.actions_by_round else {}
    voters = sum(not a.abstains for a in last.values())
    decision = final_decision(rec)
    if decision is None or voters < rec.min_participants:
        raise BlockRejected(RejectReason.CONSENSUS_MISMATCH, "too few participants in the final round")
    wanted = ConsensusStatus.UNANIMOUS if rec.problem.kind is ProblemKind.DEFINITIVE else ConsensusStatus.GRADED
    if decision.status is not wanted or decision.confidence != rec.confidence:
        raise BlockRejected(
            RejectReason.CONSENSUS_MISMATCH,
            f"recomputed {decision.status.value} C={decision.confidence}, recorded C={rec.confidence}",
        )


class Chain:
    """Blocks on top of the all-zero genesis hash. Height equals block count."""

    def __init__(self, blocks=()):
        self.blocks: list[Block] = []
        for b in blocks:
            verify_and_append(self, b)

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block | None:
        return self.blocks[-1] if self.blocks else None

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].hash if self.blocks else ZERO_HASH

    def to_bytes(self) -> bytes:
        return b"".join(Writer().blob(b.to_bytes()).getvalue() for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)


def verify_and_append(chain: Chain, block: Block) -> Chain:
    verify_block(block, chain.height + 1, chain.tip_hash)
    chain.blocks.append(block)
    return chain


# -- persistence ------------------------------------------------------------------


def write_chain(path, chain: Chain) -> None:
    Path(path).write_bytes(chain.to_bytes())


def append_block(path, block: Block) -> None:
    with open(path, "ab") as fh:
        fh.write(Writer().blob(canonical_serialize(block)).getvalue())
        fh.flush()
        os.fsync(fh.fileno())


def read_frames(data: bytes) -> list[bytes]:
    r = Reader(data)
    frames = []
    while r.remaining:
        try:
            frames.append(r.blob())
        except DecodeError as exc:
            raise VerificationFailed(len(frames) + 1, f"truncated frame: {exc}") from exc
    return frames


def load_chain(path) -> Chain:
    """Replay a chain file from genesis; raises :class:`VerificationFailed`."""
    chain = Chain()
    for height, frame in enumerate(read_frames(Path(path).read_bytes()), start=1):
        try:
            block = deserialize_block(frame)
            verify_and_append(chain, block)
        except (DecodeError, OversizeBlock, ValueError) as exc:
            raise VerificationFailed(height, f"undecodable block: {exc}") from exc
        except BlockRejected as exc:
            raise VerificationFailed(height, str(exc)) from exc
    return chain
