"""Per-deliberation measurements and their tabular form."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Hashable, Mapping

from .core import AccuracyUnavailable, Action, DefinitiveAction, normalize_value

__all__ = ["MetricsSample", "consensus_accuracy", "AccuracyUnavailable", "to_csv", "SAMPLE_COLUMNS"]


def consensus_accuracy(actions: Mapping[Hashable, Action], truth: str | None) -> Fraction:
    """Share of agents whose value equals the ground truth (correct agents / total)."""
    if truth is None:
        raise AccuracyUnavailable("problem has no ground truth")
    if not actions:
        return Fraction(0)
    truth = normalize_value(truth)
    hits = sum(isinstance(a, DefinitiveAction) and a.value == truth for a in actions.values())
    return Fraction(hits, len(actions))


@dataclass
class MetricsSample:
    problem_id: str
    agents: int
    turns: int
    outcome: str
    confidence: float
    turns_used: int
    initial_latency: int
    reflection_latency: int
    prompt_time: int
    block_size: int
    block_height: int
    participation: float
    # Padded to turns + 1 entries; after an early exit the final value repeats.
    accuracy_per_turn: list[float] | None = None
    honest_outcome: str = ""
    wall_initial: float | None = field(default=None, compare=False)
    wall_reflection: float | None = field(default=None, compare=False)
    wall_prompt: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.participation <= 1.0:
            raise ValueError("participation must lie in [0, 1]")

    @property
    def trc(self) -> int:
        return self.initial_latency + self.reflection_latency

    def row(self) -> dict:
        d = asdict(self)
        d["trc"] = self.trc
        acc = d.pop("accuracy_per_turn")
        d["accuracy_per_turn"] = "" if acc is None else ";".join(f"{a:.6f}" for a in acc)
        d["confidence"] = f"{self.confidence:.6f}"
        d["participation"] = f"{self.participation:.6f}"
        for k in ("wall_initial", "wall_reflection", "wall_prompt"):
            d[k] = "" if d[k] is None else f"{d[k]:.6f}"
        return d


SAMPLE_COLUMNS = [f.name for f in fields(MetricsSample) if f.name != "accuracy_per_turn"] + [
    "trc",
    "accuracy_per_turn",
]


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
