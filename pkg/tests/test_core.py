from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delibchain.core import (
    ABSTAIN,
    SUCCESS,
    ConsensusStatus,
    DefinitiveAction,
    DeliberationRecord,
    HungReason,
    HungSet,
    PrioritizedAction,
    Problem,
    ProblemKind,
    VariantMismatch,
    accepted_policies,
    agreement_level,
    can_start,
    check_definitive_unanimity,
    compute_payoff,
    consensus_confidence,
    hung,
    normalize_value,
)
from oracles import brute_unanimous, hand_accepted, hand_confidence, hand_count


def defs(**values):
    return {k: DefinitiveAction(normalize_value(v)) for k, v in values.items()}


def pols(**sets):
    return {k: PrioritizedAction.of(v) for k, v in sets.items()}


WORKED = pols(a1=["p1", "p2"], a2=["p1"], a3=["p1", "p2", "p3"])


@pytest.mark.parametrize(
    "raw, expected",
    [
        (" 42.0 ", "42"),
        ("Guilty", "guilty"),
        ("007", "7"),
        ("3.1400", "3.14"),
        ("-0.0", "0"),
        ("1e3", "1000"),
        ("  fund   the\nschools ", "fund the schools"),
        ("nan", "nan"),
    ],
)
def test_normalize_value(raw, expected):
    assert normalize_value(raw) == expected


@pytest.mark.parametrize("raw", ["", "   ", "\n\t"])
def test_normalize_empty_is_abstention(raw):
    assert normalize_value(raw) is ABSTAIN


@given(st.text(max_size=30))
def test_normalize_is_idempotent(text):
    v = normalize_value(text)
    if v is not ABSTAIN:
        assert normalize_value(v) == v


class TestDefinitiveUnanimity:
    def test_all_equal(self):
        out = check_definitive_unanimity(defs(a1="5", a2="5", a3="5"))
        assert out.status is ConsensusStatus.UNANIMOUS
        assert out.confidence == 1
        assert out.value == "5"

    def test_one_dissenter(self):
        out = check_definitive_unanimity(defs(a1="5", a2="7", a3="5"))
        assert out.status is ConsensusStatus.NO_CONSENSUS
        assert out.agreeing_agents == {"a1", "a3"}

    def test_single_agent(self):
        out = check_definitive_unanimity(defs(a1="5"))
        assert out.status is ConsensusStatus.UNANIMOUS and out.confidence == 1

    def test_numeric_forms_agree(self):
        assert check_definitive_unanimity(defs(a1="5", a2="5.0", a3=" 05 ")).status is ConsensusStatus.UNANIMOUS

    def test_abstention_breaks_unanimity(self):
        out = check_definitive_unanimity({"a1": DefinitiveAction("5"), "a2": DefinitiveAction(ABSTAIN)})
        assert out.status is ConsensusStatus.NO_CONSENSUS

    def test_mixed_variants(self):
        with pytest.raises(VariantMismatch):
            check_definitive_unanimity({"a1": DefinitiveAction("5"), "a2": PrioritizedAction(("x",))})

    @given(st.lists(st.sampled_from(["1", "2", "3", None]), min_size=1, max_size=8))
    def test_matches_brute_force(self, raw):
        actions = {f"a{i}": DefinitiveAction(ABSTAIN if v is None else v) for i, v in enumerate(raw)}
        values = [a.value for a in actions.values()]
        got = check_definitive_unanimity(actions).status is ConsensusStatus.UNANIMOUS
        assert got == brute_unanimous(values, ABSTAIN)


class TestGraded:
    # Expected values below were produced by oracles.hand_count / hand_accepted
    # / hand_confidence (see test_oracles.py) and frozen.
    def test_agreement_levels(self):
        assert agreement_level("p1", WORKED) == 1
        assert agreement_level("p3", WORKED) == Fraction(1, 3)
        assert agreement_level("q", WORKED) == 0

    def test_accepted_policies(self):
        assert accepted_policies(WORKED, Fraction(1, 2)) == (("p1", 1), ("p2", Fraction(2, 3)))
        assert accepted_policies(WORKED, 1) == (("p1", 1),)

    def test_full_agreement_single_policy(self):
        same = pols(a1=["p"], a2=["p"], a3=["p"])
        for theta in (Fraction(1, 10), Fraction(1, 2), 1):
            assert accepted_policies(same, theta) == (("p", 1),)

    def test_confidence_worked_example(self):
        out = consensus_confidence(WORKED, Fraction(1, 2))
        assert out.status is ConsensusStatus.GRADED
        assert out.confidence == Fraction(5, 6)

    def test_identical_sets(self):
        out = consensus_confidence(pols(a1=["p1", "p2"], a2=["p1", "p2"], a3=["p2", "p1"]), 0.5)
        assert out.confidence == 1

    def test_disjoint_sets(self):
        out = consensus_confidence(pols(a1=["x"], a2=["y"], a3=["z"]), 0.5)
        assert out.status is ConsensusStatus.NO_CONSENSUS
        assert out.confidence == 0 and out.accepted_policies == ()

    def test_float_theta_is_exact(self):
        # The binary float 0.1 is slightly above 1/10; a level of exactly 1/10 must still pass.
        acts = pols(**{f"a{i}": (["p"] if i < 1 else ["q"]) for i in range(10)})
        assert accepted_policies(acts, 0.1) == (("q", Fraction(9, 10)), ("p", Fraction(1, 10)))

    @pytest.mark.parametrize("theta", [0, Fraction(-1, 2), Fraction(3, 2)])
    def test_theta_range(self, theta):
        with pytest.raises(ValueError):
            accepted_policies(WORKED, theta)


policy_sets = st.lists(
    st.lists(st.sampled_from([f"p{i}" for i in range(6)]), max_size=6), min_size=1, max_size=8
)
thetas = st.sampled_from([Fraction(3, 10), Fraction(1, 2), Fraction(4, 5), Fraction(1)])


@settings(max_examples=200)
@given(policy_sets, thetas)
def test_graded_matches_hand_count(lists, theta):
    actions = {f"a{i}": PrioritizedAction.of(s) for i, s in enumerate(lists)}
    canon = [list(a.policies) for a in actions.values()]
    for p in {p for s in canon for p in s} | {"absent"}:
        assert agreement_level(p, actions) == Fraction(*hand_count(p, canon))
    acc = hand_accepted(canon, theta.numerator, theta.denominator)
    assert accepted_policies(actions, theta) == tuple((p, Fraction(c, n)) for p, c, n in acc)
    assert consensus_confidence(actions, theta).confidence == Fraction(*hand_confidence(canon, theta.numerator, theta.denominator))


@given(policy_sets, thetas, thetas)
def test_raising_theta_never_grows_accepted_set(lists, t1, t2):
    lo, hi = sorted([t1, t2])
    actions = {f"a{i}": PrioritizedAction.of(s) for i, s in enumerate(lists)}
    assert len(accepted_policies(actions, hi)) <= len(accepted_policies(actions, lo))


@given(policy_sets, thetas)
def test_confidence_is_one_iff_all_accepted_are_unanimous(lists, theta):
    actions = {f"a{i}": PrioritizedAction.of(s) for i, s in enumerate(lists)}
    out = consensus_confidence(actions, theta)
    if out.accepted_policies:
        assert (out.confidence == 1) == all(a == 1 for _, a in out.accepted_policies)
        assert out.confidence >= theta


@given(policy_sets, thetas)
def test_duplicating_agents_changes_nothing(lists, theta):
    actions = {f"a{i}": PrioritizedAction.of(s) for i, s in enumerate(lists)}
    doubled = dict(actions)
    doubled.update({f"b{i}": PrioritizedAction.of(s) for i, s in enumerate(lists)})
    for p in {p for a in actions.values() for p in a.policies}:
        assert agreement_level(p, doubled) == agreement_level(p, actions)
    assert consensus_confidence(doubled, theta) .confidence == consensus_confidence(actions, theta).confidence


class TestStartCriteria:
    problem = Problem("p", "statement")

    def test_fresh_problem(self):
        assert can_start(self.problem, HungSet(), {"a1", "a2"})

    def test_same_set_refused(self):
        hs = HungSet()
        hs.add("p", {"a1", "a2", "a3"})
        assert not can_start(self.problem, hs, {"a3", "a2", "a1"})

    def test_swapped_agent_admitted(self):
        hs = HungSet()
        hs.add("p", {"a1", "a2", "a3"})
        assert can_start(self.problem, hs, {"a1", "a2", "a4"})

    def test_hung_set_keeps_one_entry_per_problem(self):
        hs = HungSet()
        hs.add("p", {"a1"})
        hs.add("p", {"a2"})
        hs.add("p", {"a1"})
        assert list(hs.entries) == ["p"] and len(hs.entries["p"]) == 2
        with pytest.raises(ValueError):
            hs.add("p", set())

    @given(st.lists(st.frozensets(st.sampled_from("abcd"), min_size=1), max_size=4),
           st.frozensets(st.sampled_from("abcd"), min_size=1))
    def test_refusal_implies_exact_match(self, failed, proposed):
        hs = HungSet()
        for f in failed:
            hs.add("p", f)
        if not can_start(self.problem, hs, proposed):
            assert proposed in failed


def _record(rounds, outcome=SUCCESS, kind=ProblemKind.DEFINITIVE):
    agents = list(rounds[0])
    return DeliberationRecord(b"\0" * 32, Problem("p", "s", kind), agents, rounds, {}, Fraction(1), 5, outcome)


class TestPayoff:
    def test_full_and_partial_agreement(self):
        rec = _record([defs(a1="5", a2="7"), defs(a1="5", a2="5")])
        assert compute_payoff(rec) == {"a1": 1, "a2": Fraction(1, 2)}

    def test_hung_is_zero(self):
        rec = _record([defs(a1="5", a2="7")], outcome=hung(HungReason.TIMEOUT))
        assert compute_payoff(rec) == {"a1": 0, "a2": 0}

    def test_prioritized_counts_any_accepted_policy(self):
        rounds = [pols(a1=["x"], a2=["y"]), pols(a1=["x", "y"], a2=["y"])]
        rec = _record(rounds, kind=ProblemKind.PRIORITIZED)
        # Final accepted set at theta 1/2 is {x, y}; a1 overlaps it in both rounds.
        assert compute_payoff(rec) == {"a1": 1, "a2": 1}


def test_record_requires_consistent_agent_keys():
    with pytest.raises(ValueError):
        DeliberationRecord(b"\0" * 32, Problem("p", "s"), ["a1", "a2"], [defs(a1="1")], {}, Fraction(0), 0, SUCCESS)
