import pytest

from kedge.harness import bundled_scenarios, execute_scenario, load_scenario

SMALL = (
    "authority_conflict",
    "trust_race",
    "orthogonal_merge",
    "stale_preemption",
    "unsafe_deletion",
    "traffic_blind_scaling",
    "destructive_loop",
)


@pytest.fixture(scope="session")
def corpus_paths():
    return {p.stem: p for p in bundled_scenarios()}


@pytest.fixture(scope="session")
def small_runs(corpus_paths):
    """name -> RunArtifacts for every bundled scenario except the 10k workload."""
    return {name: execute_scenario(load_scenario(corpus_paths[name])) for name in SMALL}
