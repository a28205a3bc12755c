"""End-to-end scenario execution: govern -> contract -> token -> execute."""
from __future__ import annotations

import itertools
import json
import random
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .. import canonical
from ..contracts import TokenRegistry, compile_contract
from ..evidence import EventKind, EvidenceChain
from ..governance import GovernanceConfig, IntentProposal, build_actors, govern
from ..policy import parse
from ..state import DerivedState, Projection
from ..world import ExecutionRequest, WorldState, execute, load_world
from .invariants import check_all
from .scenario import Scenario


@dataclass
class RunReport:
    scenario: str
    seed: int
    log_digest: str
    state_digest: str
    entry_count: int
    outcomes: dict[str, dict[str, Any]]
    invariant_results: dict[str, dict[str, Any]]
    expectation_diffs: list[str]
    wall_time: float = 0.0

    @property
    def invariants_ok(self) -> bool:
        return all(r["passed"] for r in self.invariant_results.values())

    @property
    def expectations_ok(self) -> bool:
        return not self.expectation_diffs

    def to_dict(self, with_wall_time: bool = True) -> dict[str, Any]:
        d = {
            "scenario": self.scenario,
            "seed": self.seed,
            "log_digest": self.log_digest,
            "state_digest": self.state_digest,
            "entry_count": self.entry_count,
            "outcomes": self.outcomes,
            "invariant_results": self.invariant_results,
            "expectation_diffs": self.expectation_diffs,
        }
        if with_wall_time:
            d["wall_time"] = round(self.wall_time, 6)
        return d


@dataclass
class RunArtifacts:
    report: RunReport
    log: EvidenceChain
    state: DerivedState
    world: WorldState
    initial_world: WorldState


def _requests(
    proposal: IntentProposal,
    scope: frozenset[str],
    directive: dict[str, Any] | None,
    world: WorldState,
    rng: random.Random,
    now: int,
) -> tuple[list[ExecutionRequest], list[int]]:
    """Requests an executor issues for an approved proposal.

    Without a directive this is one request per in-scope entity carrying
    that entity's asserted facts. Directives add scripted misbehaviour.
    """
    legit = [
        ExecutionRequest(
            proposal.action,
            entity,
            tuple(f for f in proposal.asserted_facts if f.entity_id == entity),
        )
        for entity in sorted(scope)
    ]
    if not directive:
        return legit, [now] * len(legit)
    kind = directive["kind"]
    if kind == "late":
        at = now + int(directive.get("delay", 0))
        return legit, [at] * len(legit)
    if kind == "wrong_action":
        bad = ExecutionRequest(directive.get("action", "TerminateInstance"), proposal.target, proposal.asserted_facts)
        reqs = legit + [bad]
        return reqs, [now] * len(reqs)
    # destructive_loop: `attempts` calls of the approved action, one of them in
    # scope, the rest against other (possibly nonexistent) resources
    attempts = int(directive.get("attempts", 50))
    pool = sorted(r for r in world.resources if r not in scope)
    pool += [f"{proposal.target}-ghost-{k}" for k in range(3)]
    reqs = [legit[0]]
    for _ in range(attempts - 1):
        target = rng.choice(pool)
        reqs.append(ExecutionRequest(proposal.action, target, ()))
    rng.shuffle(reqs)
    return reqs, [now] * len(reqs)


def _check_expectations(
    s: Scenario,
    outcomes: dict[str, dict[str, Any]],
    state: DerivedState,
    world: WorldState,
    initial_world: WorldState,
) -> list[str]:
    exp = s.expected
    diffs = []
    for iid, want in sorted(exp.get("intents", {}).items()):
        got = outcomes.get(iid)
        if got is None:
            diffs.append(f"intent {iid}: never proposed")
            continue
        for k, v in want.items():
            if got.get(k) != v:
                diffs.append(f"intent {iid}: {k} expected {v!r}, got {got.get(k)!r}")
    for f in exp.get("facts", []):
        fact = state.facts.get((f["entity"], f["key"]))
        if fact is None or fact.value != f["value"]:
            got = None if fact is None else fact.value
            diffs.append(f"fact {f['entity']}.{f['key']}: expected {f['value']!r}, got {got!r}")
    for f in exp.get("absent_facts", []):
        if (f["entity"], f["key"]) in state.facts:
            diffs.append(f"fact {f['entity']}.{f['key']}: expected absent")
    flat = world.as_facts()
    for f in exp.get("world", []):
        got = flat.get((f["entity"], f["key"]))
        if got != f["value"]:
            diffs.append(f"world {f['entity']}.{f['key']}: expected {f['value']!r}, got {got!r}")
    if "world_changes_only" in exp:
        allowed = set(exp["world_changes_only"])
        before = initial_world.as_facts()
        for key in sorted(set(before) | set(flat)):
            if before.get(key) != flat.get(key) and key[0] not in allowed:
                diffs.append(f"world {key[0]}.{key[1]}: unexpected change")
    return diffs


def _outcome_table(log: EvidenceChain) -> dict[str, dict[str, Any]]:
    table: dict[str, dict[str, Any]] = {}
    for e in log:
        if e.kind is EventKind.INTENT_PROPOSED:
            table[e.intent_id] = {
                "decision": None,
                "reason": None,
                "contract": False,
                "executed": False,
                "allowed": 0,
                "denied": 0,
                "deny_reasons": {},
            }
        elif e.kind is EventKind.DECISION_RENDERED:
            row = table[e.intent_id]
            row["decision"] = e.payload["outcome"]
            row["reason"] = e.payload["reason"]
            row["matched_rules"] = e.payload["explanation"]
        elif e.kind is EventKind.CONTRACT_ISSUED:
            table[e.intent_id]["contract"] = True
        elif e.kind is EventKind.EXECUTION_OUTCOME:
            row = table[e.intent_id]
            auth = e.payload["authorization"]
            if auth["decision"] == "Allow":
                row["allowed"] += 1
            else:
                row["denied"] += 1
                reasons = Counter(row["deny_reasons"])
                reasons[auth["reason"]] += 1
                row["deny_reasons"] = dict(sorted(reasons.items()))
            if e.payload["effect"]:
                row["executed"] = True
    return table


def execute_scenario(s: Scenario, log_path: str | Path | None = None) -> RunArtifacts:
    """Run a scenario and keep the log, final state and worlds around."""
    s.validate()
    started = time.perf_counter()
    world = load_world(s.world_spec)
    initial_world = world.copy()
    cfg = GovernanceConfig.from_dict(s.governance_config)
    actors = build_actors(s.actor_registry, cfg)
    policies = parse(s.policy_source)
    log = EvidenceChain(log_path)
    registry = TokenRegistry(seed=s.seed)
    exec_rng = random.Random(f"exec:{s.seed}")
    proj = Projection()

    def sync() -> None:
        for i in range(proj.event_count, len(log)):
            proj.step(log[i])

    try:
        for tick, steps in itertools.groupby(s.script, key=lambda st: st.tick):
            steps = list(steps)
            batch_id = f"b{tick}"
            proposals = {}
            directives: dict[str, dict[str, Any] | None] = {}
            for st in steps:
                intent = dict(st.intent, actor=st.actor_id)
                p = IntentProposal.from_dict(intent, actors, default_tick=tick, batch_id=batch_id)
                proposals[p.intent_id] = p
                directives[p.intent_id] = st.hallucination
            sync()
            decisions = govern(list(proposals.values()), proj.snapshot(), world, policies, cfg, log, tick)
            for d in decisions:
                if d.payload["outcome"] != "Approve":
                    continue
                p = proposals[d.intent_id]
                contract = compile_contract(d, p, tick, cfg.contract_ttl, log)
                token = registry.mint(contract, tick)
                reqs, ticks = _requests(p, contract.resource_scope, directives[p.intent_id], world, exec_rng, tick)
                execute(contract, token, reqs, world, log, ticks, actor_role=p.actor.role)
        sync()
    finally:
        log.close()

    state = proj.snapshot()
    outcomes = _outcome_table(log)
    invariants = {k: v.to_dict() for k, v in check_all(log).items()}
    diffs = _check_expectations(s, outcomes, state, world, initial_world)
    report = RunReport(
        scenario=s.name,
        seed=s.seed,
        log_digest=log.head_digest,
        state_digest=state.state_digest,
        entry_count=len(log),
        outcomes=outcomes,
        invariant_results=invariants,
        expectation_diffs=diffs,
        wall_time=time.perf_counter() - started,
    )
    return RunArtifacts(report, log, state, world, initial_world)


def run_scenario(s: Scenario) -> RunReport:
    return execute_scenario(s).report


def write_outputs(art: RunArtifacts, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"log": out / "log.ndjson", "state": out / "state.json", "report": out / "report.json"}
    art.log.save(paths["log"])
    paths["state"].write_text(canonical.dumps(art.state.to_dict()) + "\n", encoding="utf-8")
    # the report is not hashed and carries a float wall_time, so plain sorted JSON
    report = json.dumps(art.report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
    paths["report"].write_text(report + "\n", encoding="utf-8")
    return paths


@dataclass
class DeterminismResult:
    passed: bool
    digests: list[tuple[str, str]] = field(default_factory=list)


def determinism_run(s: Scenario, repetitions: int = 2) -> DeterminismResult:
    if repetitions < 2:
        raise ValueError("determinism needs at least two repetitions")
    digests = []
    for _ in range(repetitions):
        r = run_scenario(s)
        digests.append((r.log_digest, r.state_digest))
    return DeterminismResult(len(set(digests)) == 1, digests)
