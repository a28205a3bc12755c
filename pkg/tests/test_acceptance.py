"""Acceptance suite: one test per primary criterion.

Each test prints a single ``[C<n>] PASS|FAIL ...`` line (visible even with
output capture on) and then asserts, so a failing criterion shows both.
"""
from __future__ import annotations

import contextlib
import copy
import io
import itertools
import json
import random
import time
from decimal import Decimal

import pytest

from kedge import canonical, cli
from kedge.contracts import TokenRegistry, authorize, compile_contract
from kedge.evidence import EventKind, EvidenceChain
from kedge.governance import arbitrate, detect_conflicts, govern, priority
from kedge.harness import (
    check_all,
    check_invariant_1,
    check_invariant_2,
    check_invariant_3,
    execute_scenario,
    generate_workload,
    load_scenario,
    run_scenario,
)
from kedge.policy import EvaluationRequest, Outcome, Principal, ResourceRef, evaluate, explain, parse
from kedge.state import apply, fold
from kedge.world import load_world

from conftest import SMALL
from helpers import CFG, OWNER_RULE, actor, context, oracle_fold_digest, proposal, random_log
from test_harness import copy_log, forge_outcome


@pytest.fixture
def report(capsys):
    def emit(n: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[C{n}] {'PASS' if ok else 'FAIL'} {title}: {detail}")

    return emit


# -- C1


def test_c1_scenario_outcome_parity(report, corpus_paths):
    started = time.perf_counter()
    runs = {name: execute_scenario(load_scenario(corpus_paths[name])) for name in SMALL}
    elapsed = time.perf_counter() - started
    problems = []
    for name, art in runs.items():
        problems += [f"{name}: {d}" for d in art.report.expectation_diffs]
        if not art.report.invariants_ok:
            problems.append(f"{name}: invariant failure")

    o = {name: art.report.outcomes for name, art in runs.items()}
    st = {name: art.state for name, art in runs.items()}

    def check(cond, msg):
        if not cond:
            problems.append(msg)

    check(o["authority_conflict"]["agent-close"]["decision"] == "Reject", "agent not rejected")
    check(st["authority_conflict"].value("store-1", "operating_status") == "open", "human fact not final")

    race = runs["trust_race"].log
    trust = {e.intent_id: Decimal(e.payload["actor"]["trust"]) for e in race if e.kind is EventKind.INTENT_PROPOSED}
    winners = [i for i, row in o["trust_race"].items() if row["executed"]]
    check(winners == [max(trust, key=trust.get)], f"trust race winner {winners}")

    merged = st["orthogonal_merge"]
    check(
        merged.value("store-1", "operating_status") == "open"
        and merged.value("store-2", "operating_status") == "maintenance",
        "orthogonal facts missing",
    )
    check(o["stale_preemption"]["human-stale"]["reason"] == "Stale", "stale human intent not rejected")

    for name, iid in (("unsafe_deletion", "kill-042"), ("traffic_blind_scaling", "shrink-a")):
        kinds = {e.kind for e in runs[name].log.lineage(iid)}
        check(
            o[name][iid]["decision"] == "Reject" and EventKind.EXECUTION_OUTCOME not in kinds,
            f"{name}: not rejected pre-execution",
        )

    loop = runs["destructive_loop"]
    row = o["destructive_loop"]["kill-007"]
    before, after = loop.initial_world.as_facts(), loop.world.as_facts()
    changed = {k for k in set(before) | set(after) if before.get(k) != after.get(k)}
    check((row["allowed"], row["denied"]) == (1, 49), f"loop allowed/denied {row['allowed']}/{row['denied']}")
    check(changed == {("i-007", "alive")}, f"loop mutated {sorted(changed)}")
    check(elapsed < 5.0, f"runtime {elapsed:.2f}s")

    ok = not problems
    report(1, "scenario outcome parity", ok, f"{len(runs)} scenarios in {elapsed:.2f}s" + ("" if ok else f"; {problems}"))
    assert ok, problems


# -- C2


def test_c2_determinism_at_scale(report):
    digests, times = [], []
    for _ in range(2):
        started = time.perf_counter()
        r = run_scenario(generate_workload(seed=0, n_proposals=10_000, conflict_rate=0.2))
        times.append(time.perf_counter() - started)
        digests.append((r.log_digest, r.state_digest))
    ok = digests[0] == digests[1] and max(times) < 60
    report(
        2,
        "determinism at scale",
        ok,
        f"log {digests[0][0][:16]}.. state {digests[0][1][:16]}.. runs {times[0]:.1f}s/{times[1]:.1f}s",
    )
    assert ok


# -- C3


def test_c3_invariant_suite(report, corpus_paths):
    failures = []
    for name, path in sorted(corpus_paths.items()):
        art = execute_scenario(load_scenario(path))
        for key, res in check_all(art.log).items():
            if not res.passed:
                failures.append(f"{name}/{key}")
    base = execute_scenario(load_scenario(corpus_paths["authority_conflict"])).log

    orphan = copy_log(base)
    forge_outcome(orphan, "agent-close", "ctr-forged")
    doubled = copy_log(base)
    real_id = next(e.payload["contract_id"] for e in doubled if e.kind is EventKind.CONTRACT_ISSUED)
    forge_outcome(doubled, "agent-close", real_id)
    cut = next(e.index for e in base if e.kind is EventKind.CONTRACT_ISSUED) + 1
    starved = copy_log(base, cut)

    caught = {
        "orphan outcome": not check_invariant_1(orphan).passed,
        "double-conflict execution": not check_invariant_2(doubled).passed,
        "starved contract": not check_invariant_3(starved).passed,
    }
    ok = not failures and all(caught.values())
    report(
        3,
        "invariant suite",
        ok,
        f"{len(corpus_paths)} corpus logs pass" if not failures else f"corpus failures {failures}",
    )
    assert ok, (failures, caught)


# -- C4


def _leaf_paths(obj, path=()):
    if isinstance(obj, dict) and obj:
        for k, v in obj.items():
            yield from _leaf_paths(v, path + (k,))
    elif isinstance(obj, list) and obj:
        for i, v in enumerate(obj):
            yield from _leaf_paths(v, path + (i,))
    else:
        yield path


def _set(obj, path, value):
    for p in path[:-1]:
        obj = obj[p]
    obj[path[-1]] = value


def _flip_positions(line: str):
    """Byte offset to flip for every leaf field of one canonical log line."""
    data = json.loads(line)
    marker = "☃tamper☃"
    for path in _leaf_paths(data):
        probe = copy.deepcopy(data)
        _set(probe, path, marker)
        text = canonical.dumps(probe)
        start = len(text[: text.index(json.dumps(marker, ensure_ascii=False))].encode("utf-8"))
        value = canonical.encode(_get(data, path))
        offset = 1 if value.startswith(b'"') and len(value) > 2 else len(value) - 1
        yield path, start + offset


def _get(obj, path):
    for p in path:
        obj = obj[p]
    return obj


def test_c4_tamper_detection(report, tmp_path):
    art = execute_scenario(generate_workload(seed=0, n_proposals=40))
    log = EvidenceChain.from_entries(art.log.read_range(0, 100))
    src = tmp_path / "fixture.ndjson"
    log.save(src)
    lines = src.read_bytes().split(b"\n")[:-1]
    assert len(lines) == 100

    target = tmp_path / "tampered.ndjson"
    started = time.perf_counter()
    trials, misses = 0, []
    for i, raw in enumerate(lines):
        for path, pos in _flip_positions(raw.decode("utf-8")):
            mutated = bytearray(raw)
            mutated[pos] ^= 0x01
            target.write_bytes(b"\n".join(lines[:i] + [bytes(mutated)] + lines[i + 1:]) + b"\n")
            out = io.StringIO()
            with contextlib.redirect_stdout(out):
                code = cli.main(["verify", "--log", str(target), "--json"])
            result = json.loads(out.getvalue())
            trials += 1
            if code != 2 or result["index"] is None or result["index"] > i:
                misses.append((i, path, code, result["index"]))
    elapsed = time.perf_counter() - started
    ok = not misses and elapsed < 10
    report(4, "tamper detection", ok, f"{trials} single-bit flips over 100 entries, {len(misses)} missed, {elapsed:.1f}s")
    assert ok, misses[:5]


# -- C5


def test_c5_policy_parity(report):
    ps = parse(OWNER_RULE + '@id("general-permit")\npermit (principal, action, resource);\n')

    def decide(trust):
        req = EvaluationRequest(
            Principal("agent-1", "VerifiedAgent"),
            "UpdateOperatingStatus",
            ResourceRef("store-1", "Store"),
            context(time_since_owner_update=900, trust_score=Decimal(trust)),
        )
        return evaluate(ps, req)

    low, high = decide("0.6"), decide("0.9")
    ok = (
        low.outcome is Outcome.REJECT
        and low.explanation[0] == "policy0"
        and "policy0" in explain(low)
        and high.outcome is Outcome.APPROVE
        and high.explanation == ("general-permit",)
        and "general-permit" in explain(high)
    )
    report(5, "policy parity", ok, f"trust 0.6 -> {low.outcome.value} via {low.explanation[0]}; "
                                   f"trust 0.9 -> {high.outcome.value} via {','.join(high.explanation)}")
    assert ok


# -- C6


def test_c6_fold_apply_equivalence(report):
    rng = random.Random(6)
    mismatches = 0
    for _ in range(1000):
        log = random_log(random.Random(rng.getrandbits(64)), rng.randint(1, 60))
        split = rng.randint(0, len(log))
        state = fold(log[i] for i in range(split))
        for i in range(split, len(log)):
            state = apply(state, log[i])
        full = fold(log)
        if not (state.state_digest == full.state_digest == oracle_fold_digest(log)):
            mismatches += 1
    ok = mismatches == 0
    report(6, "fold/apply equivalence", ok, f"1000 fuzzed logs, {mismatches} mismatches")
    assert ok


# -- C7

RESOURCES = [f"i-{k:03d}" for k in range(30)] + ["store-1", "ghost"]
ACTIONS = ("UpdateOperatingStatus", "UpdateMetric", "TerminateInstance", "ScaleCluster")


def test_c7_token_bound_exactness(report):
    world = load_world(
        {"version": 1, "resources": [{"id": r, "kind": "ComputeInstance"} for r in RESOURCES if r != "ghost"]}
    )
    rng = random.Random(7)
    contracts, wrong = 0, 0
    for n in range(12):
        scope = rng.sample(RESOURCES[:30], rng.randint(1, 5))
        now, ttl = rng.randint(0, 5000), rng.choice([0, 1, 60, 300, 900])
        action = rng.choice(ACTIONS)
        p = proposal(f"c{n}", actor("bot"), target=scope[0], facts=[(e, "k", 1) for e in scope],
                     action=action, origin=now)
        log = EvidenceChain()
        [d] = govern([p], fold([]), world, parse("permit (principal, action, resource);"), CFG, log, now)
        c = compile_contract(d, p, now, ttl)
        tok = TokenRegistry(seed=n).mint(c, now)
        contracts += 1
        if len(scope) * (ttl + 21) * len(ACTIONS) * len(RESOURCES) <= 10_000:
            triples = itertools.product(ACTIONS, RESOURCES, range(now - 10, now + ttl + 11))
        else:
            triples = (
                (rng.choice(ACTIONS), rng.choice(RESOURCES), rng.randint(now - 50, now + ttl + 50))
                for _ in range(10_000)
            )
        for a, r, t in triples:
            member = a == c.action and r in c.resource_scope and c.valid_from <= t <= c.valid_until
            if authorize(tok, a, r, t).allowed != member:
                wrong += 1
    ok = wrong == 0
    report(7, "token bound exactness", ok, f"{contracts} contracts x 10000 triples, {wrong} mismatches")
    assert ok


# -- C8


def _batch(rng, size, tie=False):
    """Random batch; with ``tie`` p0 and p1 conflict at an exactly shared top priority."""
    roles = ("Human", "Automation", "VerifiedAgent", "UnverifiedAgent")
    out = []
    for k in range(size):
        if tie and k < 2:
            who = actor(f"a{k}", "Human", "1.00")
            target, facts, origin = "store-1", [("k", k)], 5000 - rng.randint(0, 60)
        else:
            who = actor(f"a{k}", rng.choice(roles[1:] if tie else roles), f"{rng.randint(0, 20) / 20:.2f}")
            target = rng.choice(("store-1", "store-2"))
            facts = [(rng.choice(("k", "j")), rng.randint(0, 2))]
            origin = rng.randint(1000, 5000)
        out.append(proposal(f"p{k}", who, target=target, facts=facts, origin=origin))
    return out


def _expected_partition(batch, cfg, now):
    """Independent oracle: BFS components over live conflict pairs."""
    live = {p.intent_id: p for p in batch if now - p.origin_tick <= cfg.max_recency}
    adj = {i: set() for i in live}
    for a, b in detect_conflicts(batch, cfg.incompatible_actions):
        if a in live and b in live:
            adj[a].add(b)
            adj[b].add(a)
    admitted, escalated, seen = set(), set(), set()
    for start in sorted(live):
        if start in seen:
            continue
        comp, todo = set(), [start]
        while todo:
            x = todo.pop()
            if x not in comp:
                comp.add(x)
                todo.extend(adj[x] - comp)
        seen |= comp
        prios = sorted((priority(live[i], cfg) for i in comp), reverse=True)
        if len(comp) > 1 and prios[0] - prios[1] <= cfg.priority_epsilon:
            escalated |= comp
        else:
            admitted.add(max(comp, key=lambda i: (priority(live[i], cfg), [-ord(c) for c in i])))
    return tuple(sorted(admitted)), tuple(sorted(escalated))


def test_c8_arbitration_properties(report):
    rng = random.Random(8)
    now = 5000
    perm_bad = scale_bad = tie_bad = oracle_bad = 0
    ties = 0
    for n in range(100):
        batch = _batch(rng, rng.randint(2, 9), tie=n % 2 == 0)
        base = arbitrate(batch, CFG, now)
        part = (base.admitted, tuple(sorted(base.rejected)), base.escalated)
        if (base.admitted, base.escalated) != _expected_partition(batch, CFG, now):
            oracle_bad += 1
        for _ in range(5):
            shuffled = batch[:]
            rng.shuffle(shuffled)
            r = arbitrate(shuffled, CFG, now)
            perm_bad += (r.admitted, tuple(sorted(r.rejected)), r.escalated) != part
        for k in ("0.01", "0.5", "2", "1000"):
            r = arbitrate(batch, CFG.scaled(Decimal(k)), now)
            scale_bad += (r.admitted, tuple(sorted(r.rejected)), r.escalated) != part
        if n % 2 == 0:
            ties += 1
            # the tied pair conflicts, so its whole component must escalate
            tie_bad += not {"p0", "p1"} <= set(base.escalated)
    ok = not (perm_bad or scale_bad or tie_bad or oracle_bad)
    report(
        8,
        "arbitration properties",
        ok,
        f"100 batches: permutation diffs {perm_bad}, scaling diffs {scale_bad}, "
        f"tie batches {ties} with {tie_bad} not escalated, oracle diffs {oracle_bad}",
    )
    assert ok
