"""State derivation: a pure fold over the evidence chain.

Only ExecutionOutcome entries change facts. Everything else advances the
event counter and the clock and is otherwise lineage-only.
"""
from __future__ import annotations

import heapq
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from decimal import Decimal
from functools import cached_property
from typing import TYPE_CHECKING, Any

from . import canonical
from .errors import KedgeError, UnknownEntity
from .evidence import ChainEntry, EventKind, OutOfBounds

if TYPE_CHECKING:
    from .governance import IntentProposal
    from .world import WorldState

NO_HUMAN_UPDATE = 2**31 - 1
FACT_FIELDS = frozenset({"entity", "key", "value", "asserted_by", "asserted_at", "valid_until"})


class MalformedEntry(KedgeError):
    pass


class IndexGap(KedgeError):
    pass


@dataclass(frozen=True)
class Fact:
    entity_id: str
    key: str
    value: Any
    asserted_by: str
    asserted_at: int
    valid_until: int | None = None

    def __post_init__(self) -> None:
        if self.valid_until is not None and not self.asserted_at < self.valid_until:
            raise ValueError("fact must be asserted strictly before valid_until")

    def to_dict(self) -> dict[str, Any]:
        return {
            "entity": self.entity_id,
            "key": self.key,
            "value": self.value,
            "asserted_by": self.asserted_by,
            "asserted_at": self.asserted_at,
            "valid_until": self.valid_until,
        }

    @classmethod
    def from_dict(cls, data: Any) -> Fact:
        if not isinstance(data, dict) or set(data) != FACT_FIELDS:
            raise MalformedEntry("fact record has wrong field set")
        if not isinstance(data["entity"], str) or not isinstance(data["key"], str):
            raise MalformedEntry("fact entity and key must be strings")
        if not isinstance(data["asserted_at"], int):
            raise MalformedEntry("asserted_at must be an integer")
        until = data["valid_until"]
        if until is not None and (not isinstance(until, int) or until <= data["asserted_at"]):
            raise MalformedEntry("valid_until must be an integer after asserted_at")
        return cls(
            data["entity"], data["key"], data["value"], data["asserted_by"], data["asserted_at"], until
        )


def facts_digest(facts: Mapping[tuple[str, str], Fact]) -> str:
    return canonical.digest([facts[k].to_dict() for k in sorted(facts)])


@dataclass(frozen=True)
class DerivedState:
    facts: Mapping[tuple[str, str], Fact] = field(default_factory=dict)
    last_human_update: Mapping[str, int] = field(default_factory=dict)
    event_count: int = 0
    tick: int | None = None

    @cached_property
    def state_digest(self) -> str:
        return facts_digest(self.facts)

    def value(self, entity_id: str, key: str, default: Any = None) -> Any:
        fact = self.facts.get((entity_id, key))
        return default if fact is None else fact.value

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_count": self.event_count,
            "tick": self.tick,
            "state_digest": self.state_digest,
            "facts": [self.facts[k].to_dict() for k in sorted(self.facts)],
            "last_human_update": dict(sorted(self.last_human_update.items())),
        }


class Projection:
    """Mutable accumulator behind :func:`fold` and :func:`apply`.

    The runner keeps one of these alive for a whole run and takes
    :meth:`snapshot` copies when it needs an immutable view.
    """

    def __init__(self, state: DerivedState | None = None) -> None:
        state = state or DerivedState()
        self.facts: dict[tuple[str, str], Fact] = dict(state.facts)
        self.last_human_update: dict[str, int] = dict(state.last_human_update)
        self.event_count = state.event_count
        self.tick = state.tick
        self._expiry: list[tuple[int, str, str]] = [
            (f.valid_until, f.entity_id, f.key) for f in self.facts.values() if f.valid_until is not None
        ]
        heapq.heapify(self._expiry)

    def step(self, entry: ChainEntry) -> None:
        if entry.index != self.event_count:
            raise IndexGap(f"entry index {entry.index} != event_count {self.event_count}")
        self.tick = entry.logical_time
        if entry.kind is EventKind.EXECUTION_OUTCOME:
            self._apply_outcome(entry)
        self._expire()
        self.event_count += 1

    def _apply_outcome(self, entry: ChainEntry) -> None:
        payload = entry.payload
        effect = payload.get("effect")
        auth = payload.get("authorization")
        if not isinstance(effect, list) or not isinstance(auth, dict):
            raise MalformedEntry(f"entry {entry.index}: outcome payload malformed")
        if effect and auth.get("decision") != "Allow":
            raise MalformedEntry(f"entry {entry.index}: effects recorded on a denied outcome")
        human = payload.get("actor_role") == "Human"
        for raw in effect:
            fact = Fact.from_dict(raw)
            self.facts[(fact.entity_id, fact.key)] = fact
            if fact.valid_until is not None:
                heapq.heappush(self._expiry, (fact.valid_until, fact.entity_id, fact.key))
            if human:
                self.last_human_update[fact.entity_id] = entry.logical_time

    def _expire(self) -> None:
        while self._expiry and self._expiry[0][0] < self.tick:
            until, entity, key = heapq.heappop(self._expiry)
            current = self.facts.get((entity, key))
            if current is not None and current.valid_until is not None and current.valid_until < self.tick:
                del self.facts[(entity, key)]

    def snapshot(self) -> DerivedState:
        return DerivedState(dict(self.facts), dict(self.last_human_update), self.event_count, self.tick)


def fold(entries: Iterable[ChainEntry]) -> DerivedState:
    proj = Projection()
    for entry in entries:
        proj.step(entry)
    return proj.snapshot()


def apply(state: DerivedState, entry: ChainEntry) -> DerivedState:
    proj = Projection(state)
    proj.step(entry)
    return proj.snapshot()


def replay_at(log, n: int) -> DerivedState:
    if not 0 <= n <= len(log):
        raise OutOfBounds(f"replay index {n} outside log of length {len(log)}")
    return fold(log[i] for i in range(n))


@dataclass(frozen=True)
class ContextSnapshot:
    intent_id: str
    resource_scope: tuple[str, ...]
    attributes: Mapping[str, Any]
    snapshot_tick: int

    def __post_init__(self) -> None:
        if self.attributes["time_since_owner_update"] < 0:
            raise ValueError("time_since_owner_update must be non-negative")
        if not Decimal(0) <= self.attributes["trust_score"] <= Decimal(1):
            raise ValueError("trust_score must lie in [0, 1]")

    def to_payload(self) -> dict[str, Any]:
        attrs = {
            k: canonical.fmt4(v) if isinstance(v, Decimal) else v for k, v in self.attributes.items()
        }
        return {
            "attributes": attrs,
            "resource_scope": list(self.resource_scope),
            "snapshot_tick": self.snapshot_tick,
        }


def snapshot_context(
    state: DerivedState, proposal: IntentProposal, world: WorldState, now: int
) -> ContextSnapshot:
    target = proposal.target
    if target not in world.resources and not any(e == target for e, _ in state.facts):
        raise UnknownEntity(target)
    last = state.last_human_update.get(target)
    since = NO_HUMAN_UPDATE if last is None else max(0, now - last)
    if target in world.resources:
        deps, traffic = world.context_signals(target)
    else:
        deps, traffic = 0, "low"
    capacity_delta = 0
    if proposal.action == "ScaleCluster" and target in world.capacity:
        for f in proposal.asserted_facts:
            if f.entity_id == target and f.key == "capacity" and isinstance(f.value, int):
                capacity_delta = f.value - world.capacity[target]
    scope = sorted({target} | {f.entity_id for f in proposal.asserted_facts})
    attributes = {
        "time_since_owner_update": since,
        "trust_score": proposal.actor.trust,
        "authority": proposal.actor.authority,
        "dependency_count": deps,
        "traffic_level": traffic,
        "capacity_delta": capacity_delta,
    }
    return ContextSnapshot(proposal.intent_id, tuple(scope), attributes, now)
