"""Scenario files: world, policy, config, actors, a tick-ordered script and
declared expectations."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from ..errors import KedgeError
from ..governance import ConfigError, GovernanceConfig, build_actors
from ..policy import PolicyError, parse
from ..world import SpecError, load_world

SCENARIO_SCHEMA_VERSION = 1
HALLUCINATIONS = ("destructive_loop", "wrong_action", "late")


class ScenarioError(KedgeError):
    pass


@dataclass
class ScriptStep:
    tick: int
    actor_id: str
    intent: dict[str, Any]
    hallucination: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"tick": self.tick, "actor": self.actor_id, "intent": self.intent}
        if self.hallucination is not None:
            d["hallucination"] = self.hallucination
        return d


@dataclass
class Scenario:
    name: str
    world_spec: dict[str, Any]
    policy_source: str
    governance_config: dict[str, Any]
    actor_registry: list[dict[str, Any]]
    script: list[ScriptStep]
    seed: int = 0
    expected: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        try:
            load_world(self.world_spec)
            cfg = GovernanceConfig.from_dict(self.governance_config)
            actors = build_actors(self.actor_registry, cfg)
            parse(self.policy_source)
        except (SpecError, ConfigError, PolicyError, KeyError) as exc:
            raise ScenarioError(f"{self.name}: {exc}") from exc
        last = None
        seen: set[str] = set()
        for step in self.script:
            if last is not None and step.tick < last:
                raise ScenarioError(f"{self.name}: script tick {step.tick} goes backwards")
            last = step.tick
            if step.actor_id not in actors:
                raise ScenarioError(f"{self.name}: unknown actor {step.actor_id!r}")
            iid = step.intent.get("id")
            if not isinstance(iid, str) or iid in seen:
                raise ScenarioError(f"{self.name}: missing or duplicate intent id {iid!r}")
            seen.add(iid)
            for key in ("action", "target", "facts"):
                if key not in step.intent:
                    raise ScenarioError(f"{self.name}: intent {iid!r} lacks {key!r}")
            if step.intent.get("origin_tick", step.tick) > step.tick:
                raise ScenarioError(f"{self.name}: intent {iid!r} originates after its batch tick")
            h = step.hallucination
            if h is not None and h.get("kind") not in HALLUCINATIONS:
                raise ScenarioError(f"{self.name}: unknown hallucination {h.get('kind')!r}")
        ticks = sorted({s.tick for s in self.script})
        for step in self.script:
            h = step.hallucination
            if h and h["kind"] == "late":
                at = step.tick + int(h.get("delay", 0))
                later = [t for t in ticks if t > step.tick]
                if later and at > later[0]:
                    raise ScenarioError(f"{self.name}: late execution at {at} overlaps batch at {later[0]}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SCENARIO_SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "world": self.world_spec,
            "policy": self.policy_source,
            "governance": self.governance_config,
            "actors": self.actor_registry,
            "script": [s.to_dict() for s in self.script],
            "expected": self.expected,
        }


def bundled_path(*parts: str) -> Path:
    return Path(str(resources.files("kedge").joinpath("data", *parts)))


def bundled_scenarios() -> list[Path]:
    return sorted(bundled_path("scenarios").glob("*.json"))


def scenario_from_dict(data: dict[str, Any], base_dir: Path | None = None) -> Scenario:
    version = data.get("version", SCENARIO_SCHEMA_VERSION)
    if version != SCENARIO_SCHEMA_VERSION:
        raise ScenarioError(f"unsupported scenario schema version {version!r}")
    if "policy" in data:
        source = data["policy"]
        if isinstance(source, list):
            source = "\n".join(source)
    elif "policy_file" in data:
        path = Path(data["policy_file"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            source = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioError(f"cannot read policy file: {exc}") from exc
    else:
        source = ""
    if "workload" in data:
        from .workload import generate_workload

        w = data["workload"]
        generated = generate_workload(
            seed=int(w.get("seed", data.get("seed", 0))),
            n_proposals=int(w["n_proposals"]),
            actor_mix=w.get("actor_mix"),
            conflict_rate=float(w.get("conflict_rate", 0.2)),
            batch_size=int(w.get("batch_size", 4)),
            policy_source=source or None,
        )
        generated.name = data.get("name", generated.name)
        generated.expected = data.get("expected", {})
        return generated
    try:
        script = [
            ScriptStep(int(s["tick"]), s["actor"], s["intent"], s.get("hallucination"))
            for s in data.get("script", [])
        ]
        return Scenario(
            name=data["name"],
            world_spec=data.get("world", {}),
            policy_source=source,
            governance_config=data.get("governance", {}),
            actor_registry=data.get("actors", []),
            script=script,
            seed=int(data.get("seed", 0)),
            expected=data.get("expected", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from exc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(data, path.parent)
