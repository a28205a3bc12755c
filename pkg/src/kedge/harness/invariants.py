"""Log-only checks of the three execution invariants.

All three take nothing but the log (plus optional overrides), so anyone
holding a copy of the log can re-derive the verdicts.
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

from ..contracts import ExecutionContract
from ..evidence import ChainEntry, EventKind


@dataclass(frozen=True)
class InvariantResult:
    name: str
    passed: bool
    violations: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "violations": list(self.violations)}


def contracts_from_log(log: Iterable[ChainEntry]) -> dict[str, tuple[int, ExecutionContract]]:
    """contract_id -> (log index, contract)."""
    return {
        e.payload["contract_id"]: (e.index, ExecutionContract.from_entry(e))
        for e in log
        if e.kind is EventKind.CONTRACT_ISSUED
    }


def conflict_pairs_from_log(log: Iterable[ChainEntry]) -> set[tuple[str, str]]:
    pairs = set()
    for e in log:
        if e.kind is EventKind.DECISION_RENDERED:
            for other in e.payload["conflicts_with"]:
                pairs.add(tuple(sorted((e.intent_id, other))))
    return pairs


def check_invariant_1(
    log: Sequence[ChainEntry],
    contracts: Mapping[str, tuple[int, ExecutionContract]] | None = None,
) -> InvariantResult:
    """Every effectful outcome lies inside an earlier, approved contract."""
    if contracts is None:
        contracts = contracts_from_log(log)
    violations = []
    approved_at: dict[str, int] = {}
    for e in log:
        if e.kind is EventKind.DECISION_RENDERED and e.payload["outcome"] == "Approve":
            approved_at.setdefault(e.intent_id, e.index)
        elif e.kind is EventKind.CONTRACT_ISSUED:
            if approved_at.get(e.intent_id, e.index) >= e.index:
                violations.append(f"{e.event.event_id}: contract for {e.intent_id} without prior approval")
        elif e.kind is EventKind.EXECUTION_OUTCOME and e.payload["effect"]:
            p = e.payload
            found = contracts.get(p["contract_id"])
            if found is None or found[0] >= e.index:
                violations.append(f"{e.event.event_id}: no prior contract {p['contract_id']!r}")
                continue
            contract = found[1]
            if contract.intent_id != e.intent_id:
                violations.append(f"{e.event.event_id}: contract belongs to {contract.intent_id}")
            elif not contract.covers(p["action"], p["resource"], e.logical_time):
                violations.append(f"{e.event.event_id}: attempt outside contract bounds")
            elif any(f["entity"] not in contract.resource_scope for f in p["effect"]):
                violations.append(f"{e.event.event_id}: effect outside contract scope")
    return InvariantResult("execution_event_consistency", not violations, tuple(violations))


def check_invariant_2(
    log: Sequence[ChainEntry],
    conflict_pairs: Iterable[tuple[str, str]] | None = None,
) -> InvariantResult:
    """No conflicting pair has effectful outcomes on both sides."""
    pairs = set(conflict_pairs) if conflict_pairs is not None else set()
    pairs |= conflict_pairs_from_log(log)
    effectful = {
        e.intent_id for e in log if e.kind is EventKind.EXECUTION_OUTCOME and e.payload["effect"]
    }
    violations = [f"{a} and {b} both executed" for a, b in sorted(pairs) if a in effectful and b in effectful]
    return InvariantResult("multi_agent_conflict_safety", not violations, tuple(violations))


def check_invariant_3(
    log: Sequence[ChainEntry],
    contracts: Mapping[str, tuple[int, ExecutionContract]] | None = None,
) -> InvariantResult:
    """Every issued contract produced at least one outcome before run end."""
    if contracts is None:
        contracts = contracts_from_log(log)
    realized = {
        e.payload["contract_id"]: e.index for e in log if e.kind is EventKind.EXECUTION_OUTCOME
    }
    starved = sorted(
        cid for cid, (idx, _) in contracts.items() if realized.get(cid, -1) < idx
    )
    return InvariantResult("liveness_and_progress", not starved, tuple(starved))


def check_all(log: Sequence[ChainEntry]) -> dict[str, InvariantResult]:
    contracts = contracts_from_log(log)
    return {
        "invariant_1": check_invariant_1(log, contracts),
        "invariant_2": check_invariant_2(log),
        "invariant_3": check_invariant_3(log, contracts),
    }
