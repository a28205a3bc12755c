"""Simulated infrastructure and the contract-bounded execution adapter."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from .contracts import AuthorizationOutcome, ExecutionContract, TaskToken, authorize
from .errors import KedgeError, UnknownEntity
from .evidence import EventKind, EvidenceChain
from .state import Fact

WORLD_SCHEMA_VERSION = 1
TRAFFIC_LEVELS = ("low", "normal", "peak")
ACTIONS = ("UpdateOperatingStatus", "TerminateInstance", "ScaleCluster", "UpdateMetric")


class SpecError(KedgeError):
    pass


class ResourceKind(str, Enum):
    COMPUTE_INSTANCE = "ComputeInstance"
    CLUSTER = "Cluster"
    STORE = "Store"
    SERVICE = "Service"


# actions restricted to one resource kind; others apply to any kind
ACTION_KIND = {
    "TerminateInstance": ResourceKind.COMPUTE_INSTANCE,
    "ScaleCluster": ResourceKind.CLUSTER,
}


@dataclass
class Resource:
    entity_id: str
    kind: ResourceKind
    attributes: dict[str, Any] = field(default_factory=dict)
    alive: bool = True


@dataclass
class WorldState:
    resources: dict[str, Resource] = field(default_factory=dict)
    dependencies: set[tuple[str, str]] = field(default_factory=set)  # (dependent, dependency)
    traffic: dict[str, str] = field(default_factory=dict)
    capacity: dict[str, int] = field(default_factory=dict)

    def context_signals(self, entity_id: str) -> tuple[int, str]:
        return context_signals(self, entity_id)

    def copy(self) -> WorldState:
        return copy.deepcopy(self)

    def as_facts(self) -> dict[tuple[str, str], Any]:
        """Flat (entity, key) -> value view, used for mutation audits."""
        flat: dict[tuple[str, str], Any] = {}
        for rid, res in self.resources.items():
            flat[(rid, "alive")] = res.alive
            for k, v in res.attributes.items():
                flat[(rid, k)] = v
        for rid, n in self.capacity.items():
            flat[(rid, "capacity")] = n
        return flat

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": WORLD_SCHEMA_VERSION,
            "resources": [
                {"id": r.entity_id, "kind": r.kind.value, "attributes": dict(r.attributes), "alive": r.alive}
                for r in sorted(self.resources.values(), key=lambda r: r.entity_id)
            ],
            "dependencies": sorted([list(e) for e in self.dependencies]),
            "traffic": dict(sorted(self.traffic.items())),
            "capacity": dict(sorted(self.capacity.items())),
        }


def load_world(spec: dict[str, Any] | str | Path) -> WorldState:
    """Build a world from a spec mapping or a JSON file path."""
    if not isinstance(spec, dict):
        try:
            spec = json.loads(Path(spec).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise SpecError(f"cannot read world spec: {exc}") from exc
    if not spec:
        return WorldState()
    version = spec.get("version", WORLD_SCHEMA_VERSION)
    if version != WORLD_SCHEMA_VERSION:
        raise SpecError(f"unsupported world schema version {version!r}")
    world = WorldState()
    for raw in spec.get("resources", []):
        rid = raw.get("id")
        if not isinstance(rid, str):
            raise SpecError(f"resource without string id: {raw!r}")
        if rid in world.resources:
            raise SpecError(f"duplicate resource id {rid!r}")
        try:
            kind = ResourceKind(raw.get("kind"))
        except ValueError:
            raise SpecError(f"resource {rid!r} has unknown kind {raw.get('kind')!r}") from None
        world.resources[rid] = Resource(rid, kind, dict(raw.get("attributes", {})), bool(raw.get("alive", True)))
    for edge in spec.get("dependencies", []):
        if len(edge) != 2:
            raise SpecError(f"dependency edge must be [dependent, dependency]: {edge!r}")
        dependent, dependency = edge
        for rid in (dependent, dependency):
            if rid not in world.resources:
                raise SpecError(f"dependency edge references unknown resource {rid!r}")
        world.dependencies.add((dependent, dependency))
    for rid, level in spec.get("traffic", {}).items():
        if rid not in world.resources:
            raise SpecError(f"traffic for unknown resource {rid!r}")
        if level not in TRAFFIC_LEVELS:
            raise SpecError(f"traffic level {level!r} not one of {TRAFFIC_LEVELS}")
        world.traffic[rid] = level
    for rid, n in spec.get("capacity", {}).items():
        if rid not in world.resources or world.resources[rid].kind is not ResourceKind.CLUSTER:
            raise SpecError(f"capacity declared for non-cluster {rid!r}")
        if not isinstance(n, int) or n < 0:
            raise SpecError(f"capacity of {rid!r} must be a non-negative integer")
        world.capacity[rid] = n
    return world


def context_signals(world: WorldState, entity_id: str) -> tuple[int, str]:
    if entity_id not in world.resources:
        raise UnknownEntity(entity_id)
    dependents = sum(1 for _, dep in world.dependencies if dep == entity_id)
    return dependents, world.traffic.get(entity_id, "low")


@dataclass(frozen=True)
class ExecutionRequest:
    action: str
    resource: str
    facts: tuple[Fact, ...] = ()


@dataclass(frozen=True)
class ExecutionOutcome:
    intent_id: str
    contract_id: str
    action: str
    resource: str
    authorization: AuthorizationOutcome
    effect: tuple[Fact, ...]
    completed_at: int

    @property
    def allowed(self) -> bool:
        return self.authorization.allowed


def _world_effect(world: WorldState, contract: ExecutionContract, req: ExecutionRequest, now: int):
    """Return (deny_reason, facts) for an authorized request without mutating."""
    res = world.resources.get(req.resource)
    if res is None:
        return "UnknownResource", ()
    if not res.alive:
        return "ResourceDead", ()
    needed = ACTION_KIND.get(req.action)
    if needed is not None and res.kind is not needed:
        return "IncompatibleResource", ()
    facts = [f for f in req.facts if f.entity_id == req.resource]
    if req.action == "TerminateInstance":
        facts = [f for f in facts if f.key != "alive"]
        facts.append(Fact(req.resource, "alive", False, _asserter(req), _asserted_at(req, now)))
    elif req.action == "ScaleCluster":
        for f in facts:
            if f.key == "capacity" and (not isinstance(f.value, int) or isinstance(f.value, bool) or f.value < 0):
                return "CapacityFloor", ()
    return None, tuple(facts)


def _asserter(req: ExecutionRequest) -> str:
    return req.facts[0].asserted_by if req.facts else "system"


def _asserted_at(req: ExecutionRequest, now: int) -> int:
    return min((f.asserted_at for f in req.facts), default=now)


def apply_fact(world: WorldState, fact: Fact) -> None:
    res = world.resources[fact.entity_id]
    if fact.key == "alive":
        res.alive = bool(fact.value)
    elif fact.key == "capacity" and fact.entity_id in world.capacity:
        world.capacity[fact.entity_id] = fact.value
    else:
        res.attributes[fact.key] = fact.value


def execute(
    contract: ExecutionContract,
    token: TaskToken,
    requests: list[ExecutionRequest],
    world: WorldState,
    log: EvidenceChain,
    now: int | list[int],
    actor_role: str = "",
) -> list[ExecutionOutcome]:
    """Run requests through the token check, mutate the world, log every attempt.

    ``now`` is either one tick for all requests or one tick per request.
    """
    ticks = now if isinstance(now, list) else [now] * len(requests)
    if len(ticks) != len(requests):
        raise ValueError("one tick per request required")
    outcomes = []
    for req, tick in zip(requests, ticks):
        auth = authorize(token, req.action, req.resource, tick)
        effect: tuple[Fact, ...] = ()
        if auth.allowed:
            reason, effect = _world_effect(world, contract, req, tick)
            if reason is not None:
                auth = AuthorizationOutcome.deny(reason)
            else:
                for fact in effect:
                    apply_fact(world, fact)
        outcome = ExecutionOutcome(
            contract.intent_id, contract.contract_id, req.action, req.resource, auth, effect, tick
        )
        log.record(
            EventKind.EXECUTION_OUTCOME,
            contract.intent_id,
            {
                "action": req.action,
                "actor_role": actor_role,
                "authorization": auth.to_dict(),
                "completed_at": tick,
                "contract_id": contract.contract_id,
                "effect": [f.to_dict() for f in effect],
                "resource": req.resource,
                "token_id": token.token_id,
            },
            tick,
            actor_id=_asserter(req),
        )
        outcomes.append(outcome)
    return outcomes
