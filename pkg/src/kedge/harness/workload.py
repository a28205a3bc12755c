"""Seeded mixed-actor workload generator."""
from __future__ import annotations

import random
from collections.abc import Mapping

from ..errors import KedgeError
from ..governance import ROLES
from .scenario import Scenario, ScriptStep, bundled_path

DEFAULT_MIX = {"Human": 2, "Automation": 2, "VerifiedAgent": 4, "UnverifiedAgent": 4}
STATUS_VALUES = ("open", "closed", "maintenance")
METRIC_KEYS = ("latency_ms", "error_rate", "queue_depth")
TICK_STEP = 10
STALE_PROBABILITY = 0.02


class BadParams(KedgeError):
    pass


def _fresh_value(rng: random.Random, key: str, avoid=None):
    while True:
        v = rng.choice(STATUS_VALUES) if key == "operating_status" else rng.randint(0, 999)
        if v != avoid:
            return v


def generate_workload(
    seed: int,
    n_proposals: int,
    actor_mix: Mapping[str, int] | None = None,
    conflict_rate: float = 0.2,
    batch_size: int = 4,
    n_stores: int = 32,
    max_recency: int = 3600,
    policy_source: str | None = None,
) -> Scenario:
    """Build a reproducible scenario of ``n_proposals`` status/metric writes.

    Proposals are grouped into batches of ``batch_size`` (one batch per
    tick). Within a batch each proposal after the first re-targets an
    earlier proposal's (entity, key) with a different value with
    probability ``conflict_rate``; otherwise it takes an (entity, key)
    unused in that batch, so a rate of 0 yields conflict-free batches.
    """
    mix = dict(actor_mix or DEFAULT_MIX)
    if n_proposals <= 0 or batch_size <= 0 or n_stores <= 0:
        raise BadParams("n_proposals, batch_size and n_stores must be positive")
    if not 0.0 <= conflict_rate <= 1.0:
        raise BadParams("conflict_rate must lie in [0, 1]")
    if not mix or any(n <= 0 for n in mix.values()) or set(mix) - set(ROLES):
        raise BadParams(f"actor mix needs positive counts over roles {ROLES}")
    keys = ("operating_status",) + METRIC_KEYS
    if batch_size > n_stores * len(keys):
        raise BadParams("batch_size exceeds the number of distinct (entity, key) slots")

    rng = random.Random(seed)
    actors = []
    for role in sorted(mix):
        for k in range(mix[role]):
            trust = rng.randint(4000, 10000)
            actors.append({"id": f"{role.lower()}-{k}", "role": role, "trust": f"{trust / 10000:.4f}"})
    actor_ids = [a["id"] for a in actors]
    stores = [f"store-{k:03d}" for k in range(n_stores)]
    world = {
        "version": 1,
        "resources": [{"id": s, "kind": "Store", "attributes": {}} for s in stores],
    }

    script: list[ScriptStep] = []
    made = 0
    tick = 0
    while made < n_proposals:
        tick += TICK_STEP
        size = min(batch_size, n_proposals - made)
        used: list[tuple[str, str, object]] = []
        taken: set[tuple[str, str]] = set()
        for j in range(size):
            if j > 0 and rng.random() < conflict_rate:
                entity, key, prev = used[rng.randrange(len(used))]
                value = _fresh_value(rng, key, avoid=prev)
            else:
                while True:
                    entity, key = rng.choice(stores), rng.choice(keys)
                    if (entity, key) not in taken:
                        break
                value = _fresh_value(rng, key)
            taken.add((entity, key))
            used.append((entity, key, value))
            lag = 0
            if rng.random() < STALE_PROBABILITY and tick > max_recency + 500:
                lag = max_recency + rng.randint(1, 500)
            action = "UpdateOperatingStatus" if key == "operating_status" else "UpdateMetric"
            intent = {
                "id": f"w{seed}-{made:05d}",
                "action": action,
                "target": entity,
                "facts": [{"entity": entity, "key": key, "value": value}],
                "origin_tick": tick - lag,
            }
            script.append(ScriptStep(tick, rng.choice(actor_ids), intent))
            made += 1

    if policy_source is None:
        policy_source = bundled_path("policies", "default.kpol").read_text(encoding="utf-8")
    return Scenario(
        name=f"workload-{seed}-{n_proposals}",
        world_spec=world,
        policy_source=policy_source,
        governance_config={"max_recency": max_recency},
        actor_registry=actors,
        script=script,
        seed=seed,
    )
