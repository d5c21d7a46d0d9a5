"""Scenario files and sweep execution.

A scenario is a YAML mapping. Minimal example::

    seed: 7
    sweep: {agents: [3, 4, 5], turns: [2, 3]}
    agent: {behavior: convergent, p_adopt: 0.9, initial_accuracy: 0.6}
    problems:
      - {id: gsm-1, statement: "6 * 7?", kind: definitive, ground_truth: "42"}

Every (agents, turns) cell gets its own engine, network and chain; all
problems run in order on that chain.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from statistics import fmean

import yaml

from . import ledger
from .agent import Convergent, Remote, Scripted, Stubborn, initial_action
from .core import Problem, ProblemKind, normalize_value
from .crypto import digest
from .engine import AgentSpec, CostModel, DeliberationConfig, DeliberationEngine, DeliberationRefused, NetworkConfig
from .metrics import SAMPLE_COLUMNS, MetricsSample, to_csv

SEED_ENV = "DELIBCHAIN_SEED"
OUTPUT_ENV = "DELIBCHAIN_OUTPUT_DIR"

SUMMARY_COLUMNS = [
    "agents", "turns", "deliberations", "successes", "initial_latency", "reflection_latency",
    "trc", "prompt_time", "block_size", "max_block_size", "participation", "accuracy_per_turn",
]


class ScenarioError(ValueError):
    """Invalid scenario; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class Scenario:
    seed: int
    problems: list[dict]
    agent_counts: list[int]
    turn_counts: list[int]
    agent: dict = field(default_factory=dict)
    overrides: list[dict] = field(default_factory=list)
    dissenters: int = 0
    theta: float = 0.5
    timeout: int | None = None
    min_participants: int | None = None
    network: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    cot_fraction: float | None = None
    wall_clock: bool = False
    output_dir: Path = Path("out")


def _line_of(node, path: tuple) -> int | None:
    """Line of the YAML node addressed by ``path`` (or its nearest ancestor)."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


def _problems_from_file(path: Path) -> list[dict]:
    text = path.read_text()
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    data = yaml.safe_load(text)
    return data["problems"] if isinstance(data, dict) else data


def load_scenario(path, env=None) -> Scenario:
    env = os.environ if env is None else env
    path = Path(path)
    text = path.read_text()
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"unparseable scenario: {exc}", mark.line + 1 if mark else None) from exc
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping", 1)

    def fail(msg: str, *key):
        raise ScenarioError(msg, _line_of(root, key))

    seed = env.get(SEED_ENV, data.get("seed"))
    if seed is None:
        fail("seed is mandatory", "seed")
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        fail(f"seed must be an integer, got {seed!r}", "seed")

    sweep = data.get("sweep")
    if not isinstance(sweep, dict):
        fail("sweep mapping with 'agents' and 'turns' lists is required", "sweep")
    counts = {}
    for k in ("agents", "turns"):
        vals = sweep.get(k)
        if not isinstance(vals, list) or not vals or not all(isinstance(v, int) and v >= 1 for v in vals):
            fail(f"sweep.{k} must be a non-empty list of positive integers", "sweep", k)
        counts[k] = vals

    problems = data.get("problems")
    if "problems_file" in data:
        pf = path.parent / data["problems_file"]
        if not pf.exists():
            fail(f"problems_file {pf} does not exist", "problems_file")
        problems = (problems or []) + _problems_from_file(pf)
    if not isinstance(problems, list) or not problems:
        fail("at least one problem is required", "problems")
    seen = set()
    for i, p in enumerate(problems):
        if not isinstance(p, dict) or not str(p.get("statement", "")).strip():
            fail("problem needs a non-empty statement", "problems", i)
        p.setdefault("id", f"problem-{i}")
        if p["id"] in seen:
            fail(f"duplicate problem id {p['id']!r}", "problems", i)
        seen.add(p["id"])
        if p.setdefault("kind", "definitive") not in ("definitive", "prioritized"):
            fail(f"unknown problem kind {p['kind']!r}", "problems", i, "kind")

    agent = data.get("agent", {"behavior": "convergent"})
    if agent.get("behavior") not in ("convergent", "stubborn", "scripted", "remote"):
        fail(f"unknown behavior {agent.get('behavior')!r}", "agent", "behavior")
    theta = data.get("theta", 0.5)
    if not isinstance(theta, (int, float)) or not 0 < theta <= 1:
        fail("theta must lie in (0, 1]", "theta")
    out = env.get(OUTPUT_ENV) or data.get("output_dir", "out")
    return Scenario(
        seed=seed,
        problems=problems,
        agent_counts=counts["agents"],
        turn_counts=counts["turns"],
        agent=agent,
        overrides=data.get("agents") or [],
        dissenters=int(data.get("dissenters", 0)),
        theta=theta,
        timeout=data.get("timeout"),
        min_participants=data.get("min_participants"),
        network=data.get("network") or {},
        costs=data.get("costs") or {},
        cot_fraction=data.get("cot_fraction"),
        wall_clock=bool(data.get("wall_clock", False)),
        output_dir=(path.parent / out) if not Path(out).is_absolute() else Path(out),
    )


def _subseed(*parts) -> int:
    return int.from_bytes(digest("|".join(map(str, parts)).encode())[:8], "big")


def _wrong_answers(truth: str, k: int) -> list[str]:
    try:
        base = Decimal(truth)
        return [normalize_value(str(base + j + 1)) for j in range(k)]
    except InvalidOperation:
        return [f"not {truth} ({j + 1})" for j in range(k)]


def initial_answers(problem: dict, n: int, rng: random.Random, accuracy: float) -> list:
    """Per-agent starting answers for convergent agents."""
    if problem["kind"] == "prioritized":
        sets = problem.get("initial_policies")
        if not sets:
            raise ScenarioError(f"prioritized problem {problem['id']} needs initial_policies")
        return [sets[i % len(sets)] for i in range(n)]
    if problem.get("initial_answers"):
        answers = problem["initial_answers"]
        return [answers[i % len(answers)] for i in range(n)]
    truth = problem.get("ground_truth")
    if truth is None:
        raise ScenarioError(f"problem {problem['id']} needs ground_truth or initial_answers")
    correct = math.floor(accuracy * n + 0.5)
    slots = list(range(n))
    rng.shuffle(slots)
    wrong = iter(_wrong_answers(str(truth), n - correct))
    right = set(slots[:correct])
    return [str(truth) if i in right else next(wrong) for i in range(n)]


def _behavior(spec: dict, kind: ProblemKind, answer, seed: int, turns: int):
    b = spec.get("behavior", "convergent")
    if b == "convergent":
        return Convergent(initial_action(answer, kind), float(spec.get("p_adopt", 1.0)), seed)
    if b == "stubborn":
        value = spec.get("policies") if kind is ProblemKind.PRIORITIZED else spec.get("value", answer)
        return Stubborn(initial_action(value, kind))
    if b == "scripted":
        script = list(spec.get("script") or [])
        if not script:
            raise ScenarioError("scripted agents need a script")
        return Scripted(tuple(script + [script[-1]] * (turns + 1 - len(script))))
    if b == "remote":
        return Remote(spec["endpoint"], spec.get("model", "default"), float(spec.get("timeout", 60)))
    raise ScenarioError(f"unknown behavior {b!r}")


def _agents(sc: Scenario, n: int, turns: int, pidx: int, problem: dict) -> list[AgentSpec]:
    kind = ProblemKind[problem["kind"].upper()]
    rng = random.Random(_subseed(sc.seed, n, turns, pidx, "initial"))
    answers = initial_answers(problem, n, rng, float(sc.agent.get("initial_accuracy", 1.0)))
    specs = []
    for i in range(n):
        spec = dict(sc.agent)
        if i < len(sc.overrides):
            spec.update(sc.overrides[i])
        honest = True
        if i >= n - sc.dissenters:
            spec = {"behavior": "stubborn", "value": sc.agent.get("dissent_value", "dissent"),
                    "policies": sc.agent.get("dissent_policies", ["dissent"])}
            honest = False
        behavior = _behavior(spec, kind, answers[i], _subseed(sc.seed, n, turns, pidx, i), turns)
        specs.append(AgentSpec(f"agent-{i}", behavior, honest=spec.get("honest", honest)))
    return specs


def _problem(p: dict) -> Problem:
    truth = p.get("ground_truth")
    return Problem(str(p["id"]), str(p["statement"]), ProblemKind[p["kind"].upper()],
                   None if truth is None else str(truth))


@dataclass
class CellResult:
    agents: int
    turns: int
    samples: list[MetricsSample]
    chain_path: Path
    engine: DeliberationEngine = field(repr=False)


def run_cell(sc: Scenario, n: int, turns: int, chain_path: Path | None = None) -> CellResult:
    net = dict(sc.network)
    if "latency" in net:
        net["latency"] = tuple(net["latency"])
    config = DeliberationConfig(
        _agents(sc, n, turns, 0, sc.problems[0]),
        max_turns=turns,
        timeout=sc.timeout,
        theta=sc.theta,
        min_participants=sc.min_participants,
        seed=_subseed(sc.seed, n, turns, "network"),
        network=NetworkConfig(**net),
        costs=CostModel(**sc.costs),
        cot_fraction=sc.cot_fraction,
        wall_clock=sc.wall_clock,
    )
    engine = DeliberationEngine(config)
    samples = []
    for pidx, p in enumerate(sc.problems):
        if pidx:
            for spec, new in zip(config.agents, _agents(sc, n, turns, pidx, p)):
                spec.behavior = new.behavior
        try:
            result = engine.run_deliberation(_problem(p))
        except DeliberationRefused:
            continue
        samples.append(result.metrics)
        if chain_path is not None:
            ledger.append_block(chain_path, result.block)
    return CellResult(n, turns, samples, chain_path, engine)


def summarize(agents: int, turns: int, samples: list[MetricsSample]) -> dict:
    row = {"agents": agents, "turns": turns, "deliberations": len(samples),
           "successes": sum(s.outcome == "success" for s in samples)}
    if not samples:
        return row
    for k in ("initial_latency", "reflection_latency", "trc", "prompt_time", "block_size", "participation"):
        row[k] = f"{fmean(getattr(s, k) for s in samples):.3f}"
    row["max_block_size"] = max(s.block_size for s in samples)
    series = [s.accuracy_per_turn for s in samples if s.accuracy_per_turn]
    if series:
        width = min(len(a) for a in series)
        row["accuracy_per_turn"] = ";".join(f"{fmean(a[t] for a in series):.6f}" for t in range(width))
    return row


@dataclass
class ScenarioResult:
    summary: list[dict]
    samples: list[dict]
    chain_paths: list[Path]
    chains_valid: bool


def run_scenario(sc: Scenario) -> ScenarioResult:
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    summary, rows, paths = [], [], []
    for n in sc.agent_counts:
        for t in sc.turn_counts:
            chain_path = out / f"chain_a{n}_t{t}.bin"
            chain_path.write_bytes(b"")
            cell = run_cell(sc, n, t, chain_path)
            paths.append(chain_path)
            with open(out / f"transcript_a{n}_t{t}.jsonl", "w") as fh:
                for rec in cell.engine.transcript_log:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            summary.append(summarize(n, t, cell.samples))
            rows.extend(s.row() for s in cell.samples)
    (out / "samples.csv").write_text(to_csv(rows, SAMPLE_COLUMNS))
    (out / "summary.csv").write_text(to_csv(summary, SUMMARY_COLUMNS))
    valid = True
    for p in paths:
        try:
            ledger.load_chain(p)
        except ledger.VerificationFailed:
            valid = False
    return ScenarioResult(summary, rows, paths, valid)
