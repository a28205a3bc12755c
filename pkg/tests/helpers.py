"""Builders shared by the test modules."""
from __future__ import annotations

import hashlib
import json
import random
from decimal import Decimal

from kedge.evidence import EventKind, EvidenceChain
from kedge.governance import GovernanceConfig, IntentProposal
from kedge.state import Fact

CFG = GovernanceConfig()

OWNER_RULE = """\
forbid (
  principal in Role::"Agent",
  action == Action::"UpdateOperatingStatus",
  resource
)
when {
  context.time_since_owner_update < 3600 &&
  context.trust_score < 0.8
};
"""

GENERAL_PERMIT = 'permit (principal, action, resource);\n'


def actor(actor_id: str, role: str = "VerifiedAgent", trust: str = "0.5", cfg: GovernanceConfig = CFG):
    return cfg.actor(actor_id, role, trust)


def proposal(
    intent_id: str,
    who,
    target: str = "store-1",
    facts: list[tuple] | None = None,
    action: str = "UpdateOperatingStatus",
    origin: int = 0,
    batch: str = "b",
) -> IntentProposal:
    """``facts`` entries are (key, value) on the target or (entity, key, value)."""
    facts = facts if facts is not None else [("operating_status", "open")]
    built = []
    for f in facts:
        entity, key, value = (target, *f) if len(f) == 2 else f
        built.append(Fact(entity, key, value, who.actor_id, origin))
    return IntentProposal(intent_id, who, action, target, tuple(built), origin, batch)


def context(**overrides):
    ctx = {
        "time_since_owner_update": 2**31 - 1,
        "trust_score": Decimal("0.5"),
        "authority": Decimal("0.6"),
        "dependency_count": 0,
        "capacity_delta": 0,
        "traffic_level": "low",
    }
    ctx.update(overrides)
    return ctx


ROLES = ("Human", "Automation", "VerifiedAgent", "UnverifiedAgent")
ENTITIES = ("s0", "s1", "s2", "s3")
KEYS = ("operating_status", "latency_ms", "queue_depth")


def _intent_payload(target: str, actor_id: str, role: str, tick: int) -> dict:
    return {
        "action": "UpdateMetric",
        "actor": {"authority": "0.6000", "id": actor_id, "role": role, "trust": "0.5000"},
        "batch_id": f"b{tick}",
        "facts": [{"entity": target, "key": "latency_ms", "valid_until": None, "value": 1}],
        "origin_tick": tick,
        "target": target,
    }


def random_log(rng: random.Random, n_events: int) -> EvidenceChain:
    """A structurally valid log with a mix of kinds and expiring facts.

    Only ExecutionOutcome entries carry effects, so this is enough to
    exercise the fold; it does not follow the governance pipeline.
    """
    log = EvidenceChain()
    tick = 0
    intents: list[str] = []
    for _ in range(n_events):
        tick += rng.choice((0, 0, 1, 3, 10))
        if not intents or rng.random() < 0.2:
            iid = f"i{len(intents)}"
            intents.append(iid)
            role = rng.choice(ROLES)
            log.record(EventKind.INTENT_PROPOSED, iid, _intent_payload(rng.choice(ENTITIES), iid, role, tick), tick, iid)
            continue
        iid = rng.choice(intents)
        roll = rng.random()
        if roll < 0.15:
            log.record(
                EventKind.CONTEXT_SNAPSHOTTED,
                iid,
                {"attributes": {"dependency_count": 0}, "resource_scope": ["s0"], "snapshot_tick": tick},
                tick,
            )
            continue
        allowed = roll < 0.85
        effect = []
        if allowed:
            for _ in range(rng.randint(0, 3)):
                asserted = max(0, tick - rng.randint(0, 5))
                until = None if rng.random() < 0.5 else asserted + rng.randint(1, 25)
                effect.append(
                    Fact(rng.choice(ENTITIES), rng.choice(KEYS), rng.randint(0, 9), iid, asserted, until).to_dict()
                )
        log.record(
            EventKind.EXECUTION_OUTCOME,
            iid,
            {
                "action": "UpdateMetric",
                "actor_role": rng.choice(ROLES),
                "authorization": {"decision": "Allow", "reason": None}
                if allowed
                else {"decision": "Deny", "reason": "OutOfScope"},
                "completed_at": tick,
                "contract_id": f"ctr-{iid}",
                "effect": effect,
                "resource": "s0",
                "token_id": "0" * 32,
            },
            tick,
        )
    return log


def oracle_fold_digest(entries) -> str:
    """Brute-force fold written without the package: apply every allowed
    effect, then drop whatever expired before the last tick."""
    facts: dict[tuple[str, str], dict] = {}
    last_tick = None
    for e in entries:
        d = e.to_dict()
        ev = d["event"]
        last_tick = ev["logical_time"]
        if ev["kind"] != "ExecutionOutcome":
            continue
        if ev["payload"]["authorization"]["decision"] != "Allow":
            continue
        for f in ev["payload"]["effect"]:
            facts[(f["entity"], f["key"])] = f
    live = [
        facts[k]
        for k in sorted(facts)
        if facts[k]["valid_until"] is None or facts[k]["valid_until"] >= last_tick
    ]
    raw = json.dumps(live, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()
