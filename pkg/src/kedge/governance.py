"""Conflict detection, priority/recency arbitration and decision emission."""
from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any

from . import canonical
from .contracts import DEFAULT_TTL
from .errors import KedgeError
from .evidence import ChainEntry, EventKind, EvidenceChain
from .policy import (
    AttributeTypeError,
    EvaluationRequest,
    MissingAttribute,
    Outcome,
    PolicySet,
    Principal,
    ResourceRef,
    evaluate,
)
from .state import DerivedState, Fact, snapshot_context
from .world import WorldState

ROLES = ("Human", "Automation", "VerifiedAgent", "UnverifiedAgent")

DEFAULT_AUTHORITY: dict[str, Decimal] = {
    "Human": Decimal("1.0"),
    "Automation": Decimal("0.8"),
    "VerifiedAgent": Decimal("0.6"),
    "UnverifiedAgent": Decimal("0.3"),
}

# action -> actions it cannot share a target with; "*" means every action
DEFAULT_INCOMPATIBLE: dict[str, frozenset[str]] = {
    "TerminateInstance": frozenset({"*"}),
}


class ClockSkew(KedgeError):
    pass


class ConfigError(KedgeError):
    pass


def _dec(value: Any) -> Decimal:
    if isinstance(value, float):
        value = repr(value)
    try:
        return Decimal(value)
    except Exception:
        raise ConfigError(f"not a decimal: {value!r}") from None


@dataclass(frozen=True)
class Actor:
    actor_id: str
    role: str
    authority: Decimal
    trust: Decimal

    def __post_init__(self) -> None:
        for name in ("authority", "trust"):
            v = getattr(self, name)
            if not Decimal(0) <= v <= Decimal(1):
                raise ConfigError(f"actor {self.actor_id!r}: {name} {v} outside [0, 1]")

    def to_payload(self) -> dict[str, str]:
        return {
            "id": self.actor_id,
            "role": self.role,
            "authority": canonical.fmt4(self.authority),
            "trust": canonical.fmt4(self.trust),
        }


@dataclass(frozen=True)
class GovernanceConfig:
    alpha: Decimal = Decimal("0.7")
    beta: Decimal = Decimal("0.3")
    max_recency: int = 3600
    priority_epsilon: Decimal = Decimal("0.0001")
    authority: Mapping[str, Decimal] = field(default_factory=lambda: dict(DEFAULT_AUTHORITY))
    incompatible_actions: Mapping[str, frozenset[str]] = field(
        default_factory=lambda: dict(DEFAULT_INCOMPATIBLE)
    )
    contract_ttl: int = DEFAULT_TTL

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError("weights must be non-negative with a positive sum")
        if self.max_recency <= 0:
            raise ConfigError("max_recency must be positive")
        if self.priority_epsilon < 0:
            raise ConfigError("priority_epsilon must be non-negative")
        if self.contract_ttl < 0:
            raise ConfigError("contract_ttl must be non-negative")
        values = list(self.authority.values())
        if len(set(values)) != len(values):
            raise ConfigError("role -> authority mapping must be injective")
        for role, a in self.authority.items():
            if not Decimal(0) <= a <= Decimal(1):
                raise ConfigError(f"authority of {role} outside [0, 1]")

    def scaled(self, k: Decimal) -> GovernanceConfig:
        """Same config with alpha, beta and epsilon multiplied by ``k``."""
        return GovernanceConfig(
            self.alpha * k,
            self.beta * k,
            self.max_recency,
            self.priority_epsilon * k,
            self.authority,
            self.incompatible_actions,
            self.contract_ttl,
        )

    def actor(self, actor_id: str, role: str, trust: Any) -> Actor:
        if role not in self.authority:
            raise ConfigError(f"unknown role {role!r} for actor {actor_id!r}")
        return Actor(actor_id, role, self.authority[role], canonical.fixed4(trust))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GovernanceConfig:
        base = cls()
        authority = dict(base.authority)
        authority.update({k: _dec(v) for k, v in data.get("authority", {}).items()})
        incompatible = dict(base.incompatible_actions)
        incompatible.update({k: frozenset(v) for k, v in data.get("incompatible_actions", {}).items()})
        return cls(
            alpha=_dec(data.get("alpha", base.alpha)),
            beta=_dec(data.get("beta", base.beta)),
            max_recency=int(data.get("max_recency", base.max_recency)),
            priority_epsilon=_dec(data.get("priority_epsilon", base.priority_epsilon)),
            authority=authority,
            incompatible_actions=incompatible,
            contract_ttl=int(data.get("contract_ttl", base.contract_ttl)),
        )

    @classmethod
    def load(cls, path: str | Path) -> GovernanceConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_actors(records: Iterable[Mapping[str, Any]], cfg: GovernanceConfig) -> dict[str, Actor]:
    actors: dict[str, Actor] = {}
    for rec in records:
        actor = cfg.actor(rec["id"], rec["role"], rec.get("trust", "0"))
        if actor.actor_id in actors:
            raise ConfigError(f"duplicate actor {actor.actor_id!r}")
        actors[actor.actor_id] = actor
    return actors


@dataclass(frozen=True)
class IntentProposal:
    intent_id: str
    actor: Actor
    action: str
    target: str
    asserted_facts: tuple[Fact, ...]
    origin_tick: int
    batch_id: str = ""

    def __post_init__(self) -> None:
        if not self.asserted_facts:
            raise ValueError(f"intent {self.intent_id!r} asserts no facts")

    def to_payload(self) -> dict[str, Any]:
        return {
            "action": self.action,
            "actor": self.actor.to_payload(),
            "batch_id": self.batch_id,
            "facts": [
                {"entity": f.entity_id, "key": f.key, "value": f.value, "valid_until": f.valid_until}
                for f in self.asserted_facts
            ],
            "origin_tick": self.origin_tick,
            "target": self.target,
        }

    @classmethod
    def from_dict(
        cls,
        data: Mapping[str, Any],
        actors: Mapping[str, Actor],
        *,
        default_tick: int = 0,
        batch_id: str = "",
    ) -> IntentProposal:
        actor_id = data["actor"]
        if actor_id not in actors:
            raise ConfigError(f"intent {data.get('id')!r} names unknown actor {actor_id!r}")
        origin = int(data.get("origin_tick", default_tick))
        target = data["target"]
        facts = tuple(
            Fact(
                f.get("entity", target),
                f["key"],
                f["value"],
                actor_id,
                origin,
                f.get("valid_until"),
            )
            for f in data.get("facts", [])
        )
        return cls(data["id"], actors[actor_id], data["action"], target, facts, origin,
                   data.get("batch_id", batch_id))


@dataclass(frozen=True)
class ArbitrationResult:
    admitted: tuple[str, ...]
    rejected: tuple[tuple[str, str], ...]
    escalated: tuple[str, ...]
    conflict_pairs: tuple[tuple[str, str], ...]

    def status(self, intent_id: str) -> tuple[str, str]:
        """(disposition, reason) for one intent."""
        if intent_id in self.admitted:
            return "admitted", "Admitted"
        if intent_id in self.escalated:
            return "escalated", "PriorityTie"
        for i, reason in self.rejected:
            if i == intent_id:
                return "rejected", reason
        raise KeyError(intent_id)

    def partners(self, intent_id: str) -> list[str]:
        out = [b for a, b in self.conflict_pairs if a == intent_id]
        out += [a for a, b in self.conflict_pairs if b == intent_id]
        return sorted(out)


def _fact_map(p: IntentProposal) -> dict[tuple[str, str], set[str]]:
    m: dict[tuple[str, str], set[str]] = {}
    for f in p.asserted_facts:
        m.setdefault((f.entity_id, f.key), set()).add(canonical.dumps(f.value))
    return m


def _actions_clash(a: str, b: str, table: Mapping[str, frozenset[str]]) -> bool:
    ta = table.get(a, frozenset())
    tb = table.get(b, frozenset())
    return "*" in ta or "*" in tb or b in ta or a in tb


def conflict(p: IntentProposal, q: IntentProposal,
             incompatible: Mapping[str, frozenset[str]] = DEFAULT_INCOMPATIBLE) -> bool:
    if p.intent_id == q.intent_id:
        return False
    if p.target == q.target and _actions_clash(p.action, q.action, incompatible):
        return True
    fp, fq = _fact_map(p), _fact_map(q)
    for key in fp.keys() & fq.keys():
        if fp[key] != fq[key]:
            return True
    return False


def detect_conflicts(
    batch: Sequence[IntentProposal],
    incompatible: Mapping[str, frozenset[str]] = DEFAULT_INCOMPATIBLE,
) -> list[tuple[str, str]]:
    """Conflicting pairs, each ordered (smaller id, larger id), sorted."""
    pairs = set()
    for i, p in enumerate(batch):
        for q in batch[i + 1:]:
            if conflict(p, q, incompatible):
                pairs.add(tuple(sorted((p.intent_id, q.intent_id))))
    return sorted(pairs)


def priority(p: IntentProposal, cfg: GovernanceConfig) -> Decimal:
    """alpha * authority + beta * trust, exact."""
    return cfg.alpha * p.actor.authority + cfg.beta * p.actor.trust


def recency(p: IntentProposal, now: int) -> int:
    if p.origin_tick > now:
        raise ClockSkew(f"intent {p.intent_id!r} originates at {p.origin_tick}, after now={now}")
    return now - p.origin_tick


def batch_order(batch: Iterable[IntentProposal], cfg: GovernanceConfig, now: int) -> list[IntentProposal]:
    return sorted(
        batch,
        key=lambda p: (-priority(p, cfg), recency(p, now), p.actor.actor_id, p.intent_id),
    )


def _components(nodes: list[str], pairs: Iterable[tuple[str, str]]) -> list[list[str]]:
    parent = {n: n for n in nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = {}
    for n in nodes:
        groups.setdefault(find(n), []).append(n)
    return sorted(sorted(g) for g in groups.values())


def arbitrate(batch: Sequence[IntentProposal], cfg: GovernanceConfig, now: int) -> ArbitrationResult:
    if len({p.batch_id for p in batch}) > 1:
        raise ValueError("arbitration batch mixes batch ids")
    ids = [p.intent_id for p in batch]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate intent ids in batch")
    by_id = {p.intent_id: p for p in batch}
    pairs = detect_conflicts(batch, cfg.incompatible_actions)

    rejected: list[tuple[str, str]] = []
    survivors = []
    for p in batch:
        if recency(p, now) > cfg.max_recency:
            rejected.append((p.intent_id, "Stale"))
        else:
            survivors.append(p.intent_id)
    alive = set(survivors)
    live_pairs = [(a, b) for a, b in pairs if a in alive and b in alive]

    admitted: list[str] = []
    escalated: list[str] = []
    for comp in _components(survivors, live_pairs):
        if len(comp) == 1:
            admitted.append(comp[0])
            continue
        ranked = sorted(comp, key=lambda i: (-priority(by_id[i], cfg), i))
        top, second = priority(by_id[ranked[0]], cfg), priority(by_id[ranked[1]], cfg)
        if top - second <= cfg.priority_epsilon:
            escalated.extend(comp)
        else:
            admitted.append(ranked[0])
            rejected.extend((i, "LostArbitration") for i in ranked[1:])
    return ArbitrationResult(
        tuple(sorted(admitted)), tuple(sorted(rejected)), tuple(sorted(escalated)), tuple(pairs)
    )


def _decision_payload(
    outcome: str,
    reason: str,
    prio: Decimal,
    rec: int,
    partners: list[str],
    rules: list[dict[str, Any]],
    explanation: list[str],
    policy_digest: str,
) -> dict[str, Any]:
    return {
        "conflicts_with": partners,
        "evaluated_rules": rules,
        "explanation": explanation,
        "outcome": outcome,
        "policy_digest": policy_digest,
        "priority": canonical.fmt_exact(prio),
        "reason": reason,
        "recency": rec,
    }


def govern(
    batch: Sequence[IntentProposal],
    state: DerivedState,
    world: WorldState,
    policies: PolicySet,
    cfg: GovernanceConfig,
    log: EvidenceChain,
    now: int,
) -> list[ChainEntry]:
    """Arbitrate a batch, evaluate policy for the survivors and log every step.

    Each proposal gets IntentProposed (if not already logged),
    ContextSnapshotted and DecisionRendered, emitted in deterministic
    batch order. Returns the DecisionRendered entries in that order.
    """
    result = arbitrate(batch, cfg, now)
    decisions = []
    for p in batch_order(batch, cfg, now):
        if not log.has_intent(p.intent_id):
            log.record(EventKind.INTENT_PROPOSED, p.intent_id, p.to_payload(), now, p.actor.actor_id)
        ctx = snapshot_context(state, p, world, now)
        log.record(EventKind.CONTEXT_SNAPSHOTTED, p.intent_id, ctx.to_payload(), now)

        disposition, reason = result.status(p.intent_id)
        rules: list[dict[str, Any]] = []
        explanation: list[str] = []
        if disposition == "rejected":
            outcome = Outcome.REJECT
        elif disposition == "escalated":
            outcome = Outcome.ESCALATE
        else:
            res = world.resources.get(p.target)
            req = EvaluationRequest(
                Principal(p.actor.actor_id, p.actor.role),
                p.action,
                ResourceRef(p.target, res.kind.value if res else ""),
                ctx.attributes,
            )
            try:
                decision = evaluate(policies, req)
            except MissingAttribute as exc:
                outcome, reason = Outcome.ESCALATE, f"MissingAttribute:{exc.name}"
            except AttributeTypeError:
                outcome, reason = Outcome.ESCALATE, "AttributeTypeError"
            else:
                outcome, reason = decision.outcome, "Policy"
                rules = [e.to_dict() for e in decision.evaluated_rules]
                explanation = list(decision.explanation)
        payload = _decision_payload(
            outcome.value,
            reason,
            priority(p, cfg),
            recency(p, now),
            result.partners(p.intent_id),
            rules,
            explanation,
            policies.source_digest,
        )
        decisions.append(log.record(EventKind.DECISION_RENDERED, p.intent_id, payload, now))
    return decisions
