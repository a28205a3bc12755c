"""``kedge`` command-line entry point.

Exit codes:
  run           0 pass, 1 expectation failure, 2 invariant failure, 3 usage error
  verify        0 chain intact, 2 chain broken, 3 usage error
  policy check  0 Approve, 1 Reject, 2 Escalate, 3 usage error
  others        0 success, 2 corrupt log, 3 usage error

Set KEDGE_CONFIG to a JSON file with any of log_path, policy_path,
world_path, governance_config_path, seed, output_dir to supply defaults.
"""
from __future__ import annotations

import argparse
import functools
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import canonical
from .errors import KedgeError
from .evidence import ChainCorrupt, ChainEntry, EventKind, EvidenceChain, UnknownIntent, verify_file
from .governance import GovernanceConfig, IntentProposal, build_actors, govern
from .harness import ScenarioError, bundled_scenarios, execute_scenario, load_scenario, write_outputs
from .harness.workload import generate_workload
from .policy import EvaluationError, EvaluationRequest, MissingAttribute, Outcome, evaluate, explain, load_policies
from .state import fold, replay_at
from .world import load_world

EXIT_OK = 0
EXIT_USAGE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which collides with the exit contract
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class CliConfig:
    log_path: str | None = None
    policy_path: str | None = None
    world_path: str | None = None
    governance_config_path: str | None = None
    seed: int = 0
    output_dir: str | None = None

    @classmethod
    def from_env(cls) -> CliConfig:
        path = os.environ.get("KEDGE_CONFIG")
        if not path:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read KEDGE_CONFIG {path}: {exc}") from exc
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _emit(args, data: Any, text: str) -> None:
    if args.json:
        print(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        print(text)


def _load_log(path: Path, writable: bool = False) -> EvidenceChain:
    return EvidenceChain.load(path, writable=writable)


# -- rendering

def _summary(e: ChainEntry) -> str:
    p = e.payload
    if e.kind is EventKind.INTENT_PROPOSED:
        facts = ", ".join(f"{f['entity']}.{f['key']}={f['value']!r}" for f in p["facts"])
        return f"{p['actor']['id']} ({p['actor']['role']}) {p['action']} {p['target']}: {facts}"
    if e.kind is EventKind.CONTEXT_SNAPSHOTTED:
        return " ".join(f"{k}={v}" for k, v in sorted(p["attributes"].items()))
    if e.kind is EventKind.DECISION_RENDERED:
        rules = ",".join(p["explanation"]) or "-"
        return f"{p['outcome']} reason={p['reason']} priority={p['priority']} matched={rules}"
    if e.kind is EventKind.CONTRACT_ISSUED:
        scope = ",".join(p["resource_scope"])
        return f"{p['contract_id']}: {p['action']} on {{{scope}}} during [{p['valid_from']}, {p['valid_until']}]"
    auth = p["authorization"]
    verdict = auth["decision"] if auth["reason"] is None else f"{auth['decision']}({auth['reason']})"
    effects = ", ".join(f"{f['entity']}.{f['key']}={f['value']!r}" for f in p["effect"]) or "no effect"
    return f"{p['action']} {p['resource']} -> {verdict}; {effects}"


def render_entries(entries: list[ChainEntry]) -> str:
    return "\n".join(
        f"[{e.index:>6}] t={e.logical_time:<6} {e.kind.value:<19} {_summary(e)}" for e in entries
    )


def render_state(state) -> str:
    lines = [f"event_count: {state.event_count}", f"tick: {state.tick}", f"state_digest: {state.state_digest}"]
    if state.facts:
        lines.append("facts:")
        for (entity, key), f in sorted(state.facts.items()):
            until = "" if f.valid_until is None else f" (until {f.valid_until})"
            lines.append(f"  {entity}.{key} = {f.value!r}  by {f.asserted_by}@{f.asserted_at}{until}")
    return "\n".join(lines)


# -- commands

def _resolve_scenario(value: str | None) -> Path:
    if not value:
        raise UsageError("--scenario is required")
    p = Path(value)
    if p.is_file():
        return p
    if os.sep not in value and not value.endswith(".json"):
        for candidate in bundled_scenarios():
            if candidate.stem == value:
                return candidate
    raise UsageError(f"scenario not found: {value}")


def cmd_run(args, cfg: CliConfig) -> int:
    path = _resolve_scenario(args.scenario)
    out = args.out or cfg.output_dir
    if not out:
        raise UsageError("--out is required")
    try:
        scenario = load_scenario(path)
        if args.seed is not None:
            scenario.seed = args.seed
        art = execute_scenario(scenario)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from exc
    write_outputs(art, out)
    r = art.report
    text = [f"scenario {r.scenario} (seed {r.seed}): {r.entry_count} entries"]
    text.append(f"log_digest:   {r.log_digest}")
    text.append(f"state_digest: {r.state_digest}")
    for name, res in r.invariant_results.items():
        text.append(f"{name}: {'pass' if res['passed'] else 'FAIL'}")
        text.extend(f"  {v}" for v in res["violations"])
    if r.expectation_diffs:
        text.append("expectation mismatches:")
        text.extend(f"  {d}" for d in r.expectation_diffs)
    else:
        text.append("expectations: pass")
    _emit(args, r.to_dict(), "\n".join(text))
    if not r.invariants_ok:
        return 2
    if not r.expectations_ok:
        return 1
    return EXIT_OK


def cmd_verify(args, cfg: CliConfig) -> int:
    path = _existing(args.log or cfg.log_path, "--log")
    report = verify_file(path)
    _emit(args, report.to_dict(), report.describe())
    return EXIT_OK if report.ok else 2


def cmd_lineage(args, cfg: CliConfig) -> int:
    log = _load_log(_existing(args.log or cfg.log_path, "--log"))
    try:
        entries = log.lineage(args.intent)
    except UnknownIntent:
        raise UsageError(f"unknown intent {args.intent!r}") from None
    _emit(args, [e.to_dict() for e in entries], render_entries(entries))
    return EXIT_OK


def cmd_replay(args, cfg: CliConfig) -> int:
    log = _load_log(_existing(args.log or cfg.log_path, "--log"))
    at = len(log) if args.at is None else args.at
    if not 0 <= at <= len(log):
        raise UsageError(f"--at {at} outside [0, {len(log)}]")
    state = replay_at(log, at)
    if args.json:
        # byte-identical to the state.json written by `kedge run`
        print(canonical.dumps(state.to_dict()))
    else:
        print(render_state(state))
    return EXIT_OK


def cmd_submit(args, cfg: CliConfig) -> int:
    log_path = Path(args.log or cfg.log_path or "")
    if not log_path.name:
        raise UsageError("--log is required")
    policies = load_policies(_existing(args.policies or cfg.policy_path, "--policies"))
    config_path = args.config or cfg.governance_config_path
    config_data = json.loads(_existing(config_path, "--config").read_text(encoding="utf-8"))
    gcfg = GovernanceConfig.from_dict(config_data)
    world = load_world(_existing(args.world or cfg.world_path, "--world"))
    batch_file = json.loads(_existing(args.intents, "--intents").read_text(encoding="utf-8"))
    actors = build_actors(batch_file.get("actors", config_data.get("actors", [])), gcfg)
    tick = int(batch_file["tick"])
    batch_id = batch_file.get("batch_id", f"b{tick}")
    proposals = [
        IntentProposal.from_dict(i, actors, default_tick=tick, batch_id=batch_id) for i in batch_file["intents"]
    ]
    if log_path.exists() and log_path.stat().st_size:
        log = _load_log(log_path, writable=True)
    else:
        log = EvidenceChain(log_path)
    try:
        decisions = govern(proposals, fold(log), world, policies, gcfg, log, tick)
    finally:
        log.close()
    text = "\n".join(
        f"{d.intent_id}: {d.payload['outcome']} ({d.payload['reason']})"
        + (f" matched={','.join(d.payload['explanation'])}" if d.payload["explanation"] else "")
        for d in decisions
    )
    _emit(args, [d.to_dict() for d in decisions], text)
    return EXIT_OK


def cmd_policy_check(args, cfg: CliConfig) -> int:
    policies = load_policies(_existing(args.policies or cfg.policy_path, "--policies"))
    raw = json.loads(_existing(args.request, "--request").read_text(encoding="utf-8"))
    try:
        req = EvaluationRequest.from_dict(raw)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"malformed request: {exc!r}") from exc
    try:
        decision = evaluate(policies, req)
    except EvaluationError as exc:
        reason = f"MissingAttribute:{exc.name}" if isinstance(exc, MissingAttribute) else str(exc)
        _emit(args, {"outcome": "Escalate", "error": reason}, f"decision: Escalate\n  evaluation error: {exc}")
        return 2
    _emit(args, decision.to_dict(), explain(decision))
    return {Outcome.APPROVE: 0, Outcome.REJECT: 1, Outcome.ESCALATE: 2}[decision.outcome]


def cmd_generate(args, cfg: CliConfig) -> int:
    mix = json.loads(args.actor_mix) if args.actor_mix else None
    s = generate_workload(args.seed, args.n, actor_mix=mix, conflict_rate=args.conflict_rate,
                          batch_size=args.batch_size)
    Path(args.out).write_text(json.dumps(s.to_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(s.script)} proposals to {args.out}")
    return EXIT_OK


@functools.lru_cache(maxsize=None)
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kedge", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--json", action="store_true", help="machine-readable output")
        return p

    p = add("run", "run a scenario end to end")
    p.add_argument("--scenario", help="scenario file, or the name of a bundled scenario")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", help="directory for log.ndjson, state.json, report.json")
    p.set_defaults(func=cmd_run)

    p = add("verify", "verify a log's hash chain")
    p.add_argument("--log")
    p.set_defaults(func=cmd_verify)

    p = add("lineage", "print every entry of one intent")
    p.add_argument("--log")
    p.add_argument("--intent", required=True)
    p.set_defaults(func=cmd_lineage)

    p = add("replay", "derive state from the first N entries")
    p.add_argument("--log")
    p.add_argument("--at", type=int, help="number of entries to fold (default: all)")
    p.set_defaults(func=cmd_replay)

    p = add("submit", "govern one batch of intents against a log")
    p.add_argument("--log")
    p.add_argument("--policies")
    p.add_argument("--config")
    p.add_argument("--world")
    p.add_argument("--intents", help="batch file: {tick, actors?, intents}")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("policy", help="policy tools")
    psub = p.add_subparsers(dest="policy_command", parser_class=_Parser, required=True)
    p = psub.add_parser("check", help="evaluate one request")
    p.add_argument("--json", action="store_true")
    p.add_argument("--policies")
    p.add_argument("--request", help="request file: {principal, action, resource, context}")
    p.set_defaults(func=cmd_policy_check)

    p = add("generate", "write a seeded workload scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--conflict-rate", type=float, default=0.2)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--actor-mix", help='JSON role counts, e.g. \'{"Human": 1, "VerifiedAgent": 3}\'')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = CliConfig.from_env()
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"kedge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ChainCorrupt as exc:
        print(f"kedge: {exc}", file=sys.stderr)
        return 2
    except (KedgeError, ValueError, KeyError, OSError) as exc:
        print(f"kedge: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
