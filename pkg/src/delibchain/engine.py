"""The deliberation state machine.

A deliberation moves Idle -> InitialRound -> Reflection(1..T) -> Conclusion
-> Done. Agents speak in ascending node-id order; each utterance is signed,
stored at the speaker's node and gossiped. A turn ends when the transport is
quiet and every node holds every utterance of the turn. Consensus is checked
after each reflection turn.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

from . import ledger
from .agent import (
    AgentBehavior,
    AgentUnavailable,
    Prompt,
    PromptStyle,
    Scripted,
    assign_prompt_styles,
    build_initial_prompt,
    build_reflection_prompt,
    extract_action,
    respond,
)
from .core import (
    DEFAULT_THETA,
    SUCCESS,
    AccuracyUnavailable,
    Action,
    ConsensusOutcome,
    ConsensusStatus,
    DeliberationRecord,
    HungReason,
    HungSet,
    Outcome,
    Problem,
    ProblemKind,
    abstention,
    as_fraction,
    can_start,
    compute_payoff,
    decision_of,
    evaluate,
    honest_subset,
    hung,
)
from .crypto import NodeIdentity, Round, Utterance, digest, sign_utterance
from .metrics import MetricsSample, consensus_accuracy
from .network import Network, topology_from_edges

log = logging.getLogger(__name__)


class DeliberationRefused(RuntimeError):
    """The start criteria reject this (problem, agent set) pair."""


@dataclass
class AgentSpec:
    name: str
    behavior: AgentBehavior
    style: PromptStyle | None = None
    honest: bool = True
    identity: NodeIdentity = field(init=False, repr=False)

    def __post_init__(self):
        self.identity = NodeIdentity.from_name(self.name)

    @property
    def node_id(self) -> str:
        return self.identity.node_id


@dataclass
class NetworkConfig:
    latency: tuple[int, int] = (1, 3)
    drop: float = 0.0
    # Pairs of agent names; None means fully connected.
    edges: list[tuple[str, str]] | None = None
    retry_delay: int = 10


@dataclass
class CostModel:
    """Logical ticks charged per response and per KiB of assembled prompt."""

    response_ticks: int = 10
    prompt_ticks_per_kb: int = 1


@dataclass
class DeliberationConfig:
    agents: list[AgentSpec]
    max_turns: int = 3
    timeout: int | None = None
    theta: Fraction = DEFAULT_THETA
    min_participants: int | None = None
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    costs: CostModel = field(default_factory=CostModel)
    cot_fraction: float | None = None
    wall_clock: bool = False

    def __post_init__(self):
        n = len(self.agents)
        if n < 1:
            raise ValueError("need at least one agent")
        if len({a.name for a in self.agents}) != n:
            raise ValueError("agent names must be unique")
        if self.max_turns < 1:
            raise ValueError("max_turns must be at least 1")
        self.theta = as_fraction(self.theta)
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.min_participants is None:
            self.min_participants = n
        if not 1 <= self.min_participants <= n:
            raise ValueError("min_participants must lie in [1, agent count]")
        for a in self.agents:
            if isinstance(a.behavior, Scripted) and len(a.behavior.responses) < self.max_turns + 1:
                raise ValueError(f"script for {a.name} is shorter than max_turns + 1")
        if self.timeout is None:
            self.timeout = 50 * self.turn_bound()

    def turn_bound(self) -> int:
        """Generous logical-time bound for one turn including gossip quiescence."""
        hi = self.network.latency[1]
        n = len(self.agents)
        per_agent = self.costs.response_ticks + 8 * self.costs.prompt_ticks_per_kb
        return n * per_agent + n * 4 * hi + 2 * self.network.retry_delay


class Phase(enum.Enum):
    IDLE = "idle"
    INITIAL_ROUND = "initial"
    REFLECTION = "reflection"
    CONCLUSION = "conclusion"
    DONE = "done"


@dataclass(frozen=True)
class EngineState:
    phase: Phase
    turn: int = 0
    outcome: Outcome | None = None


_ALLOWED = {
    Phase.IDLE: {Phase.INITIAL_ROUND},
    Phase.INITIAL_ROUND: {Phase.REFLECTION, Phase.CONCLUSION},
    Phase.REFLECTION: {Phase.REFLECTION, Phase.CONCLUSION},
    Phase.CONCLUSION: {Phase.DONE},
    Phase.DONE: set(),
}


@dataclass
class DeliberationRun:
    """Mutable per-deliberation state."""

    problem: Problem
    deliberation_id: bytes
    start: int
    state: EngineState = EngineState(Phase.IDLE)
    history: list[EngineState] = field(default_factory=list)
    rounds: list[dict[str, Action]] = field(default_factory=list)
    speakers: list[list[str]] = field(default_factory=list)
    decision: ConsensusOutcome | None = None
    hung_reason: HungReason | None = None
    prompt_ticks: int = 0
    initial_end: int | None = None
    reflection_end: int | None = None
    wall: dict[str, float] = field(default_factory=lambda: {"initial": 0.0, "reflection": 0.0, "prompt": 0.0})

    def move(self, phase: Phase, turn: int = 0, outcome: Outcome | None = None) -> None:
        if phase not in _ALLOWED[self.state.phase]:
            raise RuntimeError(f"illegal transition {self.state.phase} -> {phase}")
        self.history.append(self.state)
        self.state = EngineState(phase, turn, outcome)

    def fail(self, reason: HungReason) -> None:
        if self.hung_reason is None:
            self.hung_reason = reason


@dataclass
class DeliberationResult:
    record: DeliberationRecord
    block: ledger.Block
    metrics: MetricsSample
    run: DeliberationRun = field(repr=False)


def _round_tag(turn: int) -> Round:
    return Round.INITIAL if turn == 0 else Round.REFLECTION


class DeliberationEngine:
    """Runs deliberations for one agent population on one simulated network.

    Successive deliberations share the network, every node's chain and the
    hung set, so restart gating and chain growth can be observed across runs.
    """

    def __init__(self, config: DeliberationConfig, hung_set: HungSet | None = None):
        self.config = config
        self.hung = hung_set if hung_set is not None else HungSet()
        self.order = sorted(config.agents, key=lambda a: a.node_id)
        self.ids = [a.node_id for a in self.order]
        styles = assign_prompt_styles(len(config.agents), config.cot_fraction)
        self.styles = {
            a.node_id: a.style or styles[i] for i, a in enumerate(config.agents)
        }
        net = config.network
        topology = None
        if net.edges is not None:
            by_name = {a.name: a.node_id for a in config.agents}
            topology = topology_from_edges(self.ids, [(by_name[x], by_name[y]) for x, y in net.edges])
        self.network = Network(
            [a.identity for a in self.order],
            seed=config.seed,
            latency=tuple(net.latency),
            drop=net.drop,
            topology=topology,
            retry_delay=net.retry_delay,
        )
        self.transcript_log: list[dict] = []
        self._count = 0

    @property
    def clock(self) -> int:
        return self.network.clock

    @property
    def proposer(self):
        return self.network[self.ids[0]]

    def chains(self) -> dict[str, ledger.Chain]:
        return {i: self.network[i].chain for i in self.ids}

    # -- rounds -------------------------------------------------------------

    def begin(self, problem: Problem) -> DeliberationRun:
        if not can_start(problem, self.hung, self.ids):
            raise DeliberationRefused(f"problem {problem.id} already hung with this agent set")
        self._count += 1
        seed = (
            b"delibchain-deliberation:" + problem.id.encode() + b"|" + ",".join(self.ids).encode()
            + b"|" + str(self._count).encode() + b"|" + str(self.proposer.chain.height).encode()
        )
        return DeliberationRun(problem, digest(seed), start=self.clock)

    def _prompt(self, run: DeliberationRun, spec, turn: int) -> Prompt:
        style = self.styles[spec.node_id]
        if turn == 0:
            return build_initial_prompt(run.problem, style)
        node = self.network[spec.node_id]
        prev = node.utterances(run.deliberation_id, _round_tag(turn - 1), turn - 1)
        own = next((u for u in prev if u.agent == spec.node_id), None)
        if own is None:
            mine = [u for u in node.utterances(run.deliberation_id) if u.agent == spec.node_id]
            if not mine:
                return build_initial_prompt(run.problem, style)
            own = mine[-1]
            prev = prev + [own]
        agents = [a for a in self.ids if a in {u.agent for u in prev}]
        return build_reflection_prompt(run.problem, own, prev, agents, style)

    def _speak(self, run: DeliberationRun, turn: int) -> list[Utterance]:
        costs = self.config.costs
        phase = "initial" if turn == 0 else "reflection"
        produced = []
        for spec in self.order:
            w0 = time.perf_counter()
            prompt = self._prompt(run, spec, turn)
            text = prompt.render()
            w1 = time.perf_counter()
            ticks = costs.prompt_ticks_per_kb * math.ceil(len(text.encode()) / 1024)
            run.prompt_ticks += ticks
            self.network.transport.advance(ticks)
            try:
                body = respond(spec.behavior, prompt, turn)
            except AgentUnavailable as exc:
                log.info("agent %s unavailable at turn %d: %s", spec.name, turn, exc)
                body = None
            run.wall["prompt"] += w1 - w0
            run.wall[phase] += time.perf_counter() - w0
            self.network.transport.advance(costs.response_ticks)
            if body is None:
                continue
            u = sign_utterance(
                spec.identity,
                Utterance(run.deliberation_id, _round_tag(turn), turn, spec.node_id, body),
            )
            self.network[spec.node_id].publish(u)
            produced.append(u)
            self.transcript_log.append(
                {"deliberation": run.deliberation_id.hex(), "round": u.round.name.lower(),
                 "turn": turn, "agent": u.agent, "digest": u.digest.hex()}
            )
        self.network.quiesce()
        return produced

    def _collect(self, run: DeliberationRun, turn: int, produced: list[Utterance]) -> dict[str, Action] | None:
        """Record the turn's actions, or mark the run hung. Returns the non-abstaining actions."""
        if not self.network.holds_all(u.digest for u in produced):
            run.fail(HungReason.TIMEOUT)
            return None
        kind = run.problem.kind
        spoke = {u.agent: u for u in produced}
        actions = {
            a: decision_of(extract_action(spoke[a].body, kind)) if a in spoke else abstention(kind)
            for a in self.ids
        }
        run.rounds.append(actions)
        run.speakers.append(sorted(spoke))
        if len(spoke) < self.config.min_participants:
            run.fail(HungReason.PARTICIPATION)
            return None
        if self.clock - run.start > self.config.timeout:
            run.fail(HungReason.TIMEOUT)
            return None
        return {a: act for a, act in actions.items() if not act.abstains}

    def run_initial_round(self, run: DeliberationRun) -> list[Utterance]:
        run.move(Phase.INITIAL_ROUND)
        produced = self._speak(run, 0)
        self._collect(run, 0, produced)
        run.initial_end = self.clock
        return produced

    def run_reflection_turn(self, run: DeliberationRun, turn: int) -> ConsensusOutcome | None:
        run.move(Phase.REFLECTION, turn)
        if self.clock - run.start > self.config.timeout:
            run.fail(HungReason.TIMEOUT)
            return None
        produced = self._speak(run, turn)
        voting = self._collect(run, turn, produced)
        if voting is None:
            return None
        if len(voting) < self.config.min_participants:
            run.decision = None
            return None
        run.decision = evaluate(run.problem.kind, voting, self.config.theta)
        return run.decision

    def _settled(self, run: DeliberationRun) -> bool:
        d = run.decision
        if d is None:
            return False
        if run.problem.kind is ProblemKind.DEFINITIVE:
            return d.status is ConsensusStatus.UNANIMOUS
        return d.status is ConsensusStatus.GRADED and d.confidence == 1

    def _reached(self, run: DeliberationRun) -> bool:
        d = run.decision
        return d is not None and d.status in (ConsensusStatus.UNANIMOUS, ConsensusStatus.GRADED)

    def conclude(self, run: DeliberationRun) -> tuple[DeliberationRecord, ledger.Block]:
        run.move(Phase.CONCLUSION)
        if run.hung_reason is None and not self._reached(run):
            run.fail(HungReason.NO_CONSENSUS)
        cfg = self.config
        keys = {a.node_id: a.identity.public_key for a in self.order}

        def make_record(outcome: Outcome) -> DeliberationRecord:
            confidence = run.decision.confidence if run.decision is not None else Fraction(0)
            rec = DeliberationRecord(
                run.deliberation_id, run.problem, list(self.ids), [dict(r) for r in run.rounds], {},
                confidence if outcome.success else Fraction(0),
                self.clock - run.start, outcome, cfg.theta, cfg.min_participants, cfg.timeout, keys,
            )
            rec.payoff = compute_payoff(rec)
            return rec

        record = make_record(SUCCESS if run.hung_reason is None else hung(run.hung_reason))
        stamp = self.clock
        candidates = {}
        if record.outcome.success:
            try:
                for node_id in self.ids:
                    node = self.network[node_id]
                    transcript = node.utterances(run.deliberation_id)
                    candidates[node_id] = ledger.build_block(record, transcript, node.chain.tip, stamp)
            except ledger.OversizeBlock:
                run.fail(HungReason.OVERSIZE)
                record = make_record(hung(HungReason.OVERSIZE))
        if not record.outcome.success:
            try:
                candidates = {
                    i: ledger.build_empty_block(record, self.network[i].chain.tip, stamp) for i in self.ids
                }
            except ledger.OversizeBlock:
                # Pathologically long values; the empty block keeps only the parameters.
                run.rounds = []
                record = make_record(record.outcome)
                candidates = {
                    i: ledger.build_empty_block(record, self.network[i].chain.tip, stamp) for i in self.ids
                }

        heights = {i: self.network[i].chain.height for i in self.ids}
        for node_id, block in candidates.items():
            self.network[node_id].candidate = block
        self.proposer.commit(candidates[self.ids[0]])
        self.network.quiesce()
        for node_id in self.ids:
            node = self.network[node_id]
            if node.chain.height == heights[node_id]:
                node.commit(candidates[node_id])
        self.network.quiesce()
        for node_id in self.ids:
            self.network[node_id].candidate = None

        if not record.outcome.success:
            self.hung.add(run.problem.id, self.ids)
        run.move(Phase.DONE, outcome=record.outcome)
        return record, self.proposer.chain.tip

    # -- end to end ---------------------------------------------------------------

    def run_deliberation(self, problem: Problem) -> DeliberationResult:
        run = self.begin(problem)
        self.run_initial_round(run)
        turn = 0
        if run.hung_reason is None:
            for turn in range(1, self.config.max_turns + 1):
                self.run_reflection_turn(run, turn)
                if run.hung_reason is not None or self._settled(run):
                    break
        run.reflection_end = self.clock
        record, block = self.conclude(run)
        return DeliberationResult(record, block, self._metrics(run, record, block), run)

    def _metrics(self, run: DeliberationRun, record: DeliberationRecord, block: ledger.Block) -> MetricsSample:
        cfg = self.config
        n = len(self.ids)
        initial_end = run.initial_end if run.initial_end is not None else run.start
        reflection_end = run.reflection_end if run.reflection_end is not None else initial_end
        accuracy = None
        if run.problem.kind is ProblemKind.DEFINITIVE and run.rounds:
            try:
                accuracy = [float(consensus_accuracy(r, run.problem.ground_truth)) for r in run.rounds]
            except AccuracyUnavailable:
                accuracy = None
            if accuracy is not None:
                accuracy += [accuracy[-1]] * (cfg.max_turns + 1 - len(accuracy))
        contributors = [a for a in self.ids if run.rounds and all(not r[a].abstains for r in run.rounds)]
        honest = [a.node_id for a in self.order if a.honest]
        honest_outcome = ""
        if run.rounds and honest:
            last = {a: act for a, act in honest_subset(run.rounds[-1], honest).items() if not act.abstains}
            if last:
                honest_outcome = evaluate(run.problem.kind, last, cfg.theta).status.value
        return MetricsSample(
            problem_id=run.problem.id,
            agents=n,
            turns=cfg.max_turns,
            outcome=str(record.outcome),
            confidence=float(record.confidence),
            turns_used=max(len(run.rounds) - 1, 0),
            initial_latency=initial_end - run.start,
            reflection_latency=reflection_end - initial_end,
            prompt_time=run.prompt_ticks,
            block_size=block.size,
            block_height=block.height,
            participation=len(contributors) / n,
            accuracy_per_turn=accuracy,
            honest_outcome=honest_outcome,
            wall_initial=run.wall["initial"] if cfg.wall_clock else None,
            wall_reflection=run.wall["reflection"] if cfg.wall_clock else None,
            wall_prompt=run.wall["prompt"] if cfg.wall_clock else None,
        )


def run_deliberation(config: DeliberationConfig, problem: Problem, engine: DeliberationEngine | None = None) -> DeliberationResult:
    engine = engine or DeliberationEngine(config)
    return engine.run_deliberation(problem)
