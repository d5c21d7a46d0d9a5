"""Agents, prompt construction and answer extraction.

Agents never see each other directly; they receive a :class:`Prompt` built
from the problem and the previous turn's responses, and return raw text.
Decisions are pulled out of that text with explicit ``ANSWER:`` and
``POLICY:`` markers.
"""

from __future__ import annotations

import enum
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence, Union

import httpx

from .core import (
    ABSTAIN,
    Action,
    DefinitiveAction,
    PrioritizedAction,
    Problem,
    ProblemKind,
    abstention,
    normalize_value,
)

ANSWER_MARKER = "ANSWER:"
POLICY_MARKER = "POLICY:"

COT_DIRECTIVE = "Let's think step by step, explaining the reasoning before answering."
REFLECTION_DIRECTIVE = (
    "Review your previous response and the responses of every agent below. "
    "Evaluate your own answer critically and give an improved answer."
)
DEFINITIVE_FORMAT = f"End your reply with a final line of the form '{ANSWER_MARKER} <value>'."
PRIORITIZED_FORMAT = (
    f"Enumerate every policy you support, one per line, each line of the form '{POLICY_MARKER} <policy>'."
)


class PromptStyle(enum.Enum):
    CHAIN_OF_THOUGHT = "cot"
    ZERO_SHOT = "zs"


class AgentUnavailable(RuntimeError):
    """The agent could not produce a response this turn."""


class IncompleteContext(ValueError):
    """A reflection prompt was requested without every agent's previous response."""


@dataclass(frozen=True)
class Prompt:
    problem: str
    kind: ProblemKind
    style: PromptStyle
    own_prev: str | None = None
    # (agent id, body) pairs in round-robin order; reflection prompts only.
    context: tuple[tuple[str, str], ...] = ()

    @property
    def reflection(self) -> bool:
        return self.own_prev is not None

    def render(self) -> str:
        parts = [f"Problem:\n{self.problem}"]
        if self.reflection:
            parts.append(f"Your previous response:\n{self.own_prev}")
            parts.append(
                "Previous responses:\n"
                + "\n".join(f"[{agent}]\n{body}" for agent, body in self.context)
            )
            parts.append(REFLECTION_DIRECTIVE)
        if self.style is PromptStyle.CHAIN_OF_THOUGHT:
            parts.append(COT_DIRECTIVE)
        parts.append(DEFINITIVE_FORMAT if self.kind is ProblemKind.DEFINITIVE else PRIORITIZED_FORMAT)
        return "\n\n".join(parts)


def assign_prompt_styles(n: int, cot_fraction: float | None = None) -> list[PromptStyle]:
    if n < 1:
        raise ValueError("need at least one agent")
    cot = math.ceil(n / 2) if cot_fraction is None else math.ceil(n * cot_fraction - 1e-9)
    return [PromptStyle.CHAIN_OF_THOUGHT] * cot + [PromptStyle.ZERO_SHOT] * (n - cot)


def build_initial_prompt(problem: Problem, style: PromptStyle) -> Prompt:
    return Prompt(problem.statement, problem.kind, style)


def build_reflection_prompt(
    problem: Problem,
    own_prev,
    all_prev: Sequence,
    agents: Sequence[str],
    style: PromptStyle = PromptStyle.ZERO_SHOT,
) -> Prompt:
    """Concatenate problem, own previous response and every previous response.

    ``own_prev`` and the entries of ``all_prev`` are utterance-like objects with
    ``agent`` and ``body`` attributes. The context is re-sorted into ``agents``
    order, so the result does not depend on the order of ``all_prev``.
    """
    by_agent = {u.agent: u for u in all_prev}
    missing = [a for a in agents if a not in by_agent]
    if missing:
        raise IncompleteContext(f"no previous response from {', '.join(missing)}")
    if own_prev.agent not in by_agent:
        raise IncompleteContext("own previous response is not part of the context")
    context = tuple((a, by_agent[a].body) for a in agents)
    return Prompt(problem.statement, problem.kind, style, own_prev.body, context)


# -- behaviors ---------------------------------------------------------------


@dataclass(frozen=True)
class Scripted:
    responses: tuple[str, ...]


@dataclass(frozen=True)
class Stubborn:
    action: Action


@dataclass(frozen=True)
class Convergent:
    """Adopts the strict-majority answer of the context with probability ``p_adopt``."""

    initial: Action
    p_adopt: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_adopt <= 1.0:
            raise ValueError("p_adopt must lie in [0, 1]")


@dataclass(frozen=True)
class Remote:
    endpoint: str
    model: str
    timeout: float = 60.0
    transport: httpx.BaseTransport | None = field(default=None, compare=False, repr=False)


AgentBehavior = Union[Scripted, Stubborn, Convergent, Remote]


def render_action(action: Action, argument: str | None = None) -> str:
    """Text that :func:`extract_action` maps back to ``action``."""
    if isinstance(action, PrioritizedAction):
        lines = [argument] if argument else []
        lines += [f"{POLICY_MARKER} {p}" for p in action.policies]
        return "\n".join(lines)
    arg = action.argument if argument is None else argument
    if action.abstains:
        return arg
    return f"{arg}\n{ANSWER_MARKER} {action.value}" if arg else f"{ANSWER_MARKER} {action.value}"


def extract_action(text: str, kind: ProblemKind) -> Action:
    if kind is ProblemKind.PRIORITIZED:
        policies = [
            line.strip()[len(POLICY_MARKER):]
            for line in text.splitlines()
            if line.strip().startswith(POLICY_MARKER)
        ]
        return PrioritizedAction.of(policies)
    idx = text.rfind(ANSWER_MARKER)
    if idx < 0:
        return DefinitiveAction(ABSTAIN, text.strip())
    return DefinitiveAction(normalize_value(text[idx + len(ANSWER_MARKER):]), text[:idx].strip())


def _majority(actions: list[Action], kind: ProblemKind):
    n = len(actions)
    if kind is ProblemKind.DEFINITIVE:
        counts = Counter(a.value for a in actions if not a.abstains)
        winners = [v for v, c in counts.items() if 2 * c > n]
        return DefinitiveAction(winners[0]) if winners else None
    counts = Counter(p for a in actions for p in a.policies)
    chosen = [p for p, c in counts.items() if 2 * c > n]
    return PrioritizedAction.of(chosen) if chosen else None


def _converge(behavior: Convergent, prompt: Prompt, turn: int) -> str:
    if not prompt.reflection:
        return render_action(behavior.initial, "My initial assessment of the problem.")
    own = extract_action(prompt.own_prev, prompt.kind)
    if own.abstains:
        own = behavior.initial
    context = [extract_action(body, prompt.kind) for _, body in prompt.context]
    majority = _majority(context, prompt.kind)
    rng = random.Random(f"{behavior.seed}:{turn}")
    adopt = majority is not None and rng.random() < behavior.p_adopt
    chosen = majority if adopt else own
    notes = [f"Turn {turn}: reviewed {len(context)} responses."]
    for (agent, _), act in zip(prompt.context, context):
        notes.append(f"Agent {agent[:12]} proposed {_summary(act)}.")
    notes.append("I adopt the majority position." if adopt else "I keep my position.")
    return render_action(chosen, "\n".join(notes))


def _summary(action: Action) -> str:
    if isinstance(action, PrioritizedAction):
        return "{" + ", ".join(action.policies) + "}"
    return "nothing" if action.abstains else str(action.value)


def _remote(behavior: Remote, prompt: Prompt) -> str:
    payload = {"model": behavior.model, "messages": [{"role": "user", "content": prompt.render()}]}
    try:
        with httpx.Client(transport=behavior.transport, timeout=behavior.timeout) as client:
            resp = client.post(behavior.endpoint, json=payload)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
    except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
        raise AgentUnavailable(f"{behavior.endpoint}: {exc}") from exc


def respond(behavior: AgentBehavior, prompt: Prompt, turn: int) -> str:
    if isinstance(behavior, Scripted):
        if turn >= len(behavior.responses):
            raise ValueError(f"script has no response for turn {turn}")
        return behavior.responses[turn]
    if isinstance(behavior, Stubborn):
        return render_action(behavior.action, "I will not change my position.")
    if isinstance(behavior, Convergent):
        return _converge(behavior, prompt, turn)
    if isinstance(behavior, Remote):
        return _remote(behavior, prompt)
    raise TypeError(f"unknown behavior {behavior!r}")


def stubborn(value: str, kind: ProblemKind = ProblemKind.DEFINITIVE) -> Stubborn:
    if kind is ProblemKind.DEFINITIVE:
        return Stubborn(DefinitiveAction(normalize_value(value)))
    return Stubborn(PrioritizedAction.of([value]))


def initial_action(value, kind: ProblemKind) -> Action:
    if value is None:
        return abstention(kind)
    if kind is ProblemKind.DEFINITIVE:
        return DefinitiveAction(normalize_value(str(value)))
    return PrioritizedAction.of(value)
