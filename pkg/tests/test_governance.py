import random
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kedge.evidence import EventKind, EvidenceChain
from kedge.governance import (
    ClockSkew,
    ConfigError,
    GovernanceConfig,
    arbitrate,
    batch_order,
    detect_conflicts,
    govern,
    priority,
    recency,
)
from kedge.policy import parse
from kedge.state import Fact, fold
from kedge.world import load_world

from helpers import CFG, GENERAL_PERMIT, OWNER_RULE, actor, proposal

WORLD = load_world({"version": 1, "resources": [{"id": f"store-{k}", "kind": "Store"} for k in range(1, 4)]})


def test_priority_worked_values():
    human = actor("h", "Human", "0.9")
    rookie = actor("u", "UnverifiedAgent", "0.0")
    assert priority(proposal("a", human), CFG) == Decimal("0.9700")
    assert priority(proposal("b", rookie), CFG) == Decimal("0.2100")


def test_authority_only_weights():
    cfg = GovernanceConfig(alpha=Decimal(1), beta=Decimal(0))
    for trust in ("0", "0.37", "1"):
        a = actor("a", "Automation", trust, cfg)
        assert priority(proposal("p", a), cfg) == Decimal("0.8")


def test_recency_examples():
    bot = actor("b")
    assert recency(proposal("p", bot, origin=100), 100) == 0
    assert recency(proposal("p", bot, origin=100), 4000) == 3900
    with pytest.raises(ClockSkew):
        recency(proposal("p", bot, origin=200), 100)


def test_authority_map_must_be_injective():
    with pytest.raises(ConfigError):
        GovernanceConfig(authority={"Human": Decimal(1), "Automation": Decimal(1)})


def test_conflicting_status_writes_form_one_pair():
    batch = [
        proposal("h", actor("alice", "Human", "0.9"), facts=[("operating_status", "open")]),
        proposal("a", actor("bot"), facts=[("operating_status", "closed")]),
    ]
    assert detect_conflicts(batch) == [("a", "h")]


def test_disjoint_and_agreeing_proposals_do_not_conflict():
    bot, other = actor("b1"), actor("b2")
    assert detect_conflicts([proposal("x", bot, target="store-1"), proposal("y", other, target="store-2")]) == []
    same = [proposal("x", bot), proposal("y", other)]
    assert detect_conflicts(same) == []


def test_termination_conflicts_with_anything_on_the_same_entity():
    batch = [
        proposal("t", actor("b1"), target="i-1", facts=[("alive", False)], action="TerminateInstance"),
        proposal("m", actor("b2"), target="i-1", facts=[("latency_ms", 5)], action="UpdateMetric"),
    ]
    assert detect_conflicts(batch) == [("m", "t")]


def test_human_beats_agent():
    batch = [
        proposal("h", actor("alice", "Human", "0.9"), facts=[("operating_status", "open")]),
        proposal("a", actor("bot", "VerifiedAgent", "0.6"), facts=[("operating_status", "closed")]),
    ]
    r = arbitrate(batch, CFG, 0)
    assert r.admitted == ("h",)
    assert r.rejected == (("a", "LostArbitration"),)


def test_higher_trust_wins_between_equal_authority_agents():
    batch = [
        proposal("lo", actor("b1", trust="0.7"), facts=[("latency_ms", 10)], action="UpdateMetric"),
        proposal("hi", actor("b2", trust="0.9"), facts=[("latency_ms", 20)], action="UpdateMetric"),
    ]
    r = arbitrate(batch, CFG, 0)
    assert r.admitted == ("hi",) and r.status("lo") == ("rejected", "LostArbitration")


def test_priority_tie_escalates_the_whole_component():
    # x-y and y-z conflict; x and z tie at the top, so all three escalate
    batch = [
        proposal("x", actor("b1", trust="0.8"), facts=[("k", 1)]),
        proposal("y", actor("b2", trust="0.1"), facts=[("k", 2), ("j", 1)]),
        proposal("z", actor("b3", trust="0.8"), facts=[("j", 2)]),
        proposal("free", actor("b4", trust="0.8"), target="store-2"),
    ]
    r = arbitrate(batch, CFG, 0)
    assert r.escalated == ("x", "y", "z")
    assert r.admitted == ("free",)


def test_difference_within_epsilon_is_a_tie():
    cfg = GovernanceConfig(priority_epsilon=Decimal("0.0003"))
    batch = [
        proposal("x", actor("b1", trust="0.8005", cfg=cfg), facts=[("k", 1)]),
        proposal("y", actor("b2", trust="0.8000", cfg=cfg), facts=[("k", 2)]),
    ]
    assert arbitrate(batch, cfg, 0).escalated == ("x", "y")
    assert arbitrate(batch, CFG, 0).escalated == ()


def test_stale_proposal_is_rejected_despite_authority():
    batch = [
        proposal("old", actor("alice", "Human", "1"), facts=[("k", 1)], origin=0),
        proposal("new", actor("bot", "UnverifiedAgent", "0"), facts=[("k", 2)], origin=4000),
    ]
    r = arbitrate(batch, CFG, 4000)
    assert r.status("old") == ("rejected", "Stale")
    assert r.admitted == ("new",)


def test_recency_at_limit_is_not_stale():
    r = arbitrate([proposal("p", actor("b"), origin=400)], CFG, 4000)
    assert r.admitted == ("p",)


def test_batch_order_is_priority_then_recency_then_ids():
    h = actor("h", "Human", "0.5")
    a1, a2 = actor("a1", trust="0.5"), actor("a2", trust="0.5")
    batch = [
        proposal("p3", a2, origin=10),
        proposal("p2", a1, origin=10),
        proposal("p1", a1, origin=5),
        proposal("p0", h, origin=0),
    ]
    assert [p.intent_id for p in batch_order(batch, CFG, 10)] == ["p0", "p2", "p3", "p1"]


def _random_batch(rng: random.Random, size: int, stale_heavy: bool = False):
    roles = ("Human", "Automation", "VerifiedAgent", "UnverifiedAgent")
    batch = []
    for k in range(size):
        who = actor(f"a{k}", rng.choice(roles), f"{rng.randint(0, 10) / 10:.1f}")
        target = rng.choice(("store-1", "store-2", "store-3"))
        facts = [(rng.choice(("k", "j")), rng.randint(0, 2))]
        origin = rng.randint(0, 5000) if stale_heavy else rng.randint(3000, 5000)
        action = "TerminateInstance" if rng.random() < 0.1 else "UpdateMetric"
        batch.append(proposal(f"p{k}", who, target=target, facts=facts, action=action, origin=origin))
    return batch


def test_no_conflict_pair_ever_fully_admitted():
    rng = random.Random(2024)
    for _ in range(10_000):
        batch = _random_batch(rng, rng.randint(2, 7))
        r = arbitrate(batch, CFG, 5000)
        admitted = set(r.admitted)
        for a, b in r.conflict_pairs:
            assert not (a in admitted and b in admitted)


def test_corpus_batches_respect_conflict_safety(small_runs):
    for art in small_runs.values():
        decisions = {e.intent_id: e.payload for e in art.log if e.kind is EventKind.DECISION_RENDERED}
        for iid, payload in decisions.items():
            if payload["outcome"] == "Approve":
                for other in payload["conflicts_with"]:
                    assert decisions[other]["outcome"] != "Approve"


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), size=st.integers(1, 8))
def test_stale_proposals_never_admitted(seed, size):
    rng = random.Random(seed)
    batch = _random_batch(rng, size, stale_heavy=True)
    # make one stale intent as strong as possible
    strong = proposal("boss", actor("boss", "Human", "1"), facts=[("k", 9)], origin=0)
    r = arbitrate(batch + [strong], CFG, 5000)
    for p in batch + [strong]:
        if 5000 - p.origin_tick > CFG.max_recency:
            assert p.intent_id not in r.admitted and p.intent_id not in r.escalated


def _partition(r):
    return (r.admitted, tuple(sorted(r.rejected)), r.escalated)


def test_permutation_invariance():
    rng = random.Random(99)
    for _ in range(100):
        batch = _random_batch(rng, rng.randint(2, 9))
        base = _partition(arbitrate(batch, CFG, 5000))
        for _ in range(3):
            shuffled = batch[:]
            rng.shuffle(shuffled)
            assert _partition(arbitrate(shuffled, CFG, 5000)) == base


@pytest.mark.parametrize("k", ["0.001", "0.5", "3", "1000", "7.25"])
def test_joint_scaling_preserves_partition(k):
    rng = random.Random(int(Decimal(k) * 1000))
    scaled = CFG.scaled(Decimal(k))
    for _ in range(200):
        batch = _random_batch(rng, rng.randint(2, 8))
        assert _partition(arbitrate(batch, scaled, 5000)) == _partition(arbitrate(batch, CFG, 5000))


def _govern_payloads(batch, policy_src, now=1000, state=None):
    log = EvidenceChain()
    decisions = govern(batch, state or fold([]), WORLD, parse(policy_src), CFG, log, now)
    return log, decisions


def test_single_clean_proposal_is_approved():
    log, decisions = _govern_payloads([proposal("p", actor("bot"), origin=1000)], GENERAL_PERMIT)
    assert [e.kind for e in log] == [
        EventKind.INTENT_PROPOSED,
        EventKind.CONTEXT_SNAPSHOTTED,
        EventKind.DECISION_RENDERED,
    ]
    assert decisions[0].payload["outcome"] == "Approve"
    assert decisions[0].payload["priority"] == "0.57"


def test_owner_protection_through_govern():
    # a human wrote store-1 at tick 100; the agent tries at tick 1000
    history = EvidenceChain()
    history.record(
        EventKind.INTENT_PROPOSED,
        "h",
        proposal("h", actor("alice", "Human", "0.9"), origin=100).to_payload(),
        100,
        "alice",
    )
    history.record(
        EventKind.EXECUTION_OUTCOME,
        "h",
        {
            "action": "UpdateOperatingStatus",
            "actor_role": "Human",
            "authorization": {"decision": "Allow", "reason": None},
            "completed_at": 100,
            "contract_id": "ctr-h",
            "effect": [Fact("store-1", "operating_status", "open", "alice", 100).to_dict()],
            "resource": "store-1",
            "token_id": "0" * 32,
        },
        100,
    )
    p = proposal("a", actor("bot", trust="0.6"), facts=[("operating_status", "closed")], origin=1000)
    _, decisions = _govern_payloads([p], OWNER_RULE + GENERAL_PERMIT, state=fold(history))
    payload = decisions[0].payload
    assert payload["outcome"] == "Reject"
    assert payload["explanation"][0] == "policy0"
    assert {"rule_id": "policy0", "matched": True, "effect": "forbid"} in payload["evaluated_rules"]


def test_missing_attribute_escalates():
    ps = parse('permit (principal, action, resource) when { context.not_supplied > 0.1 };')
    log = EvidenceChain()
    decisions = govern([proposal("p", actor("bot"), origin=0)], fold([]), WORLD, ps, CFG, log, 0)
    assert decisions[0].payload["outcome"] == "Escalate"
    assert decisions[0].payload["reason"] == "MissingAttribute:not_supplied"


def test_govern_is_deterministic_and_order_free():
    rng = random.Random(5)
    for _ in range(100):
        batch = _random_batch(rng, rng.randint(1, 6))
        base = [e.to_line() for e in _govern_payloads(batch, GENERAL_PERMIT, now=5000)[0]]
        shuffled = batch[:]
        rng.shuffle(shuffled)
        again = [e.to_line() for e in _govern_payloads(shuffled, GENERAL_PERMIT, now=5000)[0]]
        assert again == base
