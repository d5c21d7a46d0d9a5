"""Deliberative consensus on a simulated blockchain network."""

from .core import (
    ABSTAIN,
    ConsensusOutcome,
    ConsensusStatus,
    DefinitiveAction,
    DeliberationRecord,
    HungReason,
    HungSet,
    PrioritizedAction,
    Problem,
    ProblemKind,
)
from .engine import AgentSpec, DeliberationConfig, DeliberationEngine, NetworkConfig, run_deliberation

__version__ = "0.1.0"

__all__ = [
    "ABSTAIN",
    "AgentSpec",
    "ConsensusOutcome",
    "ConsensusStatus",
    "DefinitiveAction",
    "DeliberationConfig",
    "DeliberationEngine",
    "DeliberationRecord",
    "HungReason",
    "HungSet",
    "NetworkConfig",
    "PrioritizedAction",
    "Problem",
    "ProblemKind",
    "run_deliberation",
]
