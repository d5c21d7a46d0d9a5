"""Domain types and consensus arithmetic for deliberation games.

Everything here is pure: no I/O, no clocks, no shared state. Agreement
levels and confidences are exact ``Fraction`` values so that results can be
compared bit-for-bit across nodes and against independent recomputation.
"""

from __future__ import annotations

import enum
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Hashable, Mapping, Sequence, Union

DEFAULT_THETA = Fraction(1, 2)

_WS = re.compile(r"\s+")
_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)(e[+-]?\d+)?")


class VariantMismatch(ValueError):
    """Raised when a consensus check receives actions of the wrong kind."""


class _Abstention:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSTAIN"

    def __reduce__(self):
        return (_Abstention, ())


ABSTAIN = _Abstention()
"""Marker for a value that normalizes to nothing."""

Value = Union[str, _Abstention]


class ProblemKind(enum.Enum):
    DEFINITIVE = 0
    PRIORITIZED = 1


class ConsensusStatus(enum.Enum):
    UNANIMOUS = "unanimous"
    GRADED = "graded"
    NO_CONSENSUS = "no_consensus"


class HungReason(enum.Enum):
    TIMEOUT = 1
    PARTICIPATION = 2
    NO_CONSENSUS = 3
    OVERSIZE = 4


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    kind: ProblemKind = ProblemKind.DEFINITIVE
    ground_truth: str | None = None

    def __post_init__(self):
        if not self.statement.strip():
            raise ValueError("problem statement must be non-empty")


@dataclass(frozen=True)
class DefinitiveAction:
    value: Value
    argument: str = ""

    @property
    def abstains(self) -> bool:
        return self.value is ABSTAIN


@dataclass(frozen=True)
class PrioritizedAction:
    # Sorted and deduplicated; empty means abstention.
    policies: tuple[str, ...] = ()

    @classmethod
    def of(cls, policies) -> "PrioritizedAction":
        normalized = (normalize_value(p) for p in policies)
        return cls(tuple(sorted({p for p in normalized if p is not ABSTAIN})))

    @property
    def abstains(self) -> bool:
        return not self.policies


Action = Union[DefinitiveAction, PrioritizedAction]


def decision_of(action: Action) -> Action:
    """The action stripped to what consensus compares; arguments live in the transcript."""
    if isinstance(action, DefinitiveAction) and action.argument:
        return DefinitiveAction(action.value)
    return action


def abstention(kind: ProblemKind) -> Action:
    if kind is ProblemKind.DEFINITIVE:
        return DefinitiveAction(ABSTAIN)
    return PrioritizedAction()


@dataclass(frozen=True)
class ConsensusOutcome:
    status: ConsensusStatus
    confidence: Fraction
    accepted_policies: tuple[tuple[str, Fraction], ...] = ()
    agreeing_agents: frozenset = frozenset()
    value: Value | None = None


@dataclass(frozen=True)
class Outcome:
    """Terminal state of a deliberation: success, or hung with a reason."""

    hung_reason: HungReason | None = None

    @property
    def success(self) -> bool:
        return self.hung_reason is None

    def __str__(self) -> str:
        return "success" if self.success else f"hung:{self.hung_reason.name.lower()}"


SUCCESS = Outcome()


def hung(reason: HungReason) -> Outcome:
    return Outcome(reason)


@dataclass
class DeliberationRecord:
    """Everything a block stores about one deliberation."""

    deliberation_id: bytes
    problem: Problem
    agents: list[str]
    actions_by_round: list[dict[str, Action]]
    payoff: dict[str, Fraction]
    confidence: Fraction
    completed_at: int
    outcome: Outcome
    theta: Fraction = DEFAULT_THETA
    min_participants: int = 1
    timeout: int = 0
    agent_keys: dict[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        for i, actions in enumerate(self.actions_by_round):
            if list(actions) != list(self.agents):
                raise ValueError(f"round {i} action map does not match the agent list")


@dataclass
class HungSet:
    entries: dict[str, list[frozenset]] = field(default_factory=dict)

    def add(self, problem_id: str, agents) -> None:
        agents = frozenset(agents)
        if not agents:
            raise ValueError("failed deliberator set must be non-empty")
        failed = self.entries.setdefault(problem_id, [])
        if agents not in failed:
            failed.append(agents)

    def __contains__(self, problem_id: str) -> bool:
        return problem_id in self.entries


def as_fraction(x) -> Fraction:
    """Exact fraction for config numbers; floats go through their repr so 0.3 is 3/10."""
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def normalize_value(text: str) -> Value:
    """Canonicalize free-text answers so equal answers compare equal.

    >>> normalize_value(" 42.0 ")
    '42'
    >>> normalize_value("Guilty")
    'guilty'
    """
    s = _WS.sub(" ", text.strip()).casefold()
    if not s:
        return ABSTAIN
    if _NUMBER.fullmatch(s):
        try:
            d = Decimal(s)
        except InvalidOperation:  # pragma: no cover - regex already filters
            return s
        if d == 0:
            return "0"
        s = format(d.normalize(), "f")
    return s


def check_definitive_unanimity(actions: Mapping[Hashable, Action]) -> ConsensusOutcome:
    if not actions:
        raise ValueError("action map must be non-empty")
    if not all(isinstance(a, DefinitiveAction) for a in actions.values()):
        raise VariantMismatch("definitive unanimity needs DefinitiveAction values")
    values = {a.value for a in actions.values()}
    if len(values) == 1 and ABSTAIN not in values:
        (value,) = values
        return ConsensusOutcome(
            ConsensusStatus.UNANIMOUS, Fraction(1), agreeing_agents=frozenset(actions), value=value
        )
    classes = Counter(a.value for a in actions.values() if not a.abstains)
    if not classes:
        return ConsensusOutcome(ConsensusStatus.NO_CONSENSUS, Fraction(0))
    # Largest class; ties go to the lexicographically smallest value.
    value = min(classes, key=lambda v: (-classes[v], v))
    agreeing = frozenset(k for k, a in actions.items() if a.value == value)
    return ConsensusOutcome(ConsensusStatus.NO_CONSENSUS, Fraction(0), agreeing_agents=agreeing, value=value)


def _policy_sets(actions: Mapping[Hashable, Action]) -> list[tuple[str, ...]]:
    if not actions:
        raise ValueError("action map must be non-empty")
    if not all(isinstance(a, PrioritizedAction) for a in actions.values()):
        raise VariantMismatch("graded consensus needs PrioritizedAction values")
    return [a.policies for a in actions.values()]


def agreement_level(policy: str, actions: Mapping[Hashable, Action]) -> Fraction:
    sets = _policy_sets(actions)
    return Fraction(sum(policy in s for s in sets), len(sets))


def accepted_policies(
    actions: Mapping[Hashable, Action], theta: Fraction = DEFAULT_THETA
) -> tuple[tuple[str, Fraction], ...]:
    theta = as_fraction(theta)
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    sets = _policy_sets(actions)
    counts = Counter(p for s in sets for p in set(s))
    n = len(sets)
    levels = [(p, Fraction(c, n)) for p, c in counts.items()]
    return tuple(sorted(((p, a) for p, a in levels if a >= theta), key=lambda pa: (-pa[1], pa[0])))


def consensus_confidence(
    actions: Mapping[Hashable, Action], theta: Fraction = DEFAULT_THETA
) -> ConsensusOutcome:
    acc = accepted_policies(actions, theta)
    if not acc:
        return ConsensusOutcome(ConsensusStatus.NO_CONSENSUS, Fraction(0))
    confidence = sum((a for _, a in acc), Fraction(0)) / len(acc)
    accepted = {p for p, _ in acc}
    agreeing = frozenset(k for k, a in actions.items() if accepted.intersection(a.policies))
    return ConsensusOutcome(ConsensusStatus.GRADED, confidence, acc, agreeing)


def evaluate(
    kind: ProblemKind, actions: Mapping[Hashable, Action], theta: Fraction = DEFAULT_THETA
) -> ConsensusOutcome:
    """Dispatch to the consensus rule for the problem kind."""
    if kind is ProblemKind.DEFINITIVE:
        return check_definitive_unanimity(actions)
    return consensus_confidence(actions, theta)


def can_start(problem: Problem, hung: HungSet, proposed) -> bool:
    proposed = frozenset(proposed)
    if not proposed:
        raise ValueError("proposed deliberator set must be non-empty")
    return proposed not in hung.entries.get(problem.id, ())


def final_decision(record: DeliberationRecord) -> ConsensusOutcome | None:
    """Re-evaluate the last recorded round over its non-abstaining agents."""
    if not record.actions_by_round:
        return None
    last = {a: act for a, act in record.actions_by_round[-1].items() if not act.abstains}
    if not last:
        return None
    return evaluate(record.problem.kind, last, record.theta)


def compute_payoff(record: DeliberationRecord) -> dict[str, Fraction]:
    """Placeholder contribution score; not a normative incentive scheme.

    An agent scores the fraction of recorded rounds in which its action agreed
    with the final outcome: same value for definitive problems, or at least one
    accepted policy for prioritized ones.
    """
    zeros = {a: Fraction(0) for a in record.agents}
    if not record.outcome.success or not record.actions_by_round:
        return zeros
    decision = final_decision(record)
    if decision is None or decision.status is ConsensusStatus.NO_CONSENSUS:
        return zeros
    if record.problem.kind is ProblemKind.DEFINITIVE:
        agrees = lambda act: not act.abstains and act.value == decision.value  # noqa: E731
    else:
        accepted = {p for p, _ in decision.accepted_policies}
        agrees = lambda act: bool(accepted.intersection(act.policies))  # noqa: E731
    rounds = len(record.actions_by_round)
    return {
        a: Fraction(sum(agrees(r[a]) for r in record.actions_by_round), rounds) for a in record.agents
    }


class AccuracyUnavailable(LookupError):
    pass


def honest_subset(actions: Mapping[Hashable, Action], honest: Sequence[Hashable]) -> dict:
    keep = set(honest)
    return {k: v for k, v in actions.items() if k in keep}
