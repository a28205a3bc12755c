from .invariants import (
    InvariantResult,
    check_all,
    check_invariant_1,
    check_invariant_2,
    check_invariant_3,
)
from .runner import (
    DeterminismResult,
    RunArtifacts,
    RunReport,
    determinism_run,
    execute_scenario,
    run_scenario,
    write_outputs,
)
from .scenario import Scenario, ScenarioError, ScriptStep, bundled_scenarios, load_scenario, scenario_from_dict
from .workload import BadParams, generate_workload

__all__ = [
    "BadParams",
    "DeterminismResult",
    "InvariantResult",
    "RunArtifacts",
    "RunReport",
    "Scenario",
    "ScenarioError",
    "ScriptStep",
    "bundled_scenarios",
    "check_all",
    "check_invariant_1",
    "check_invariant_2",
    "check_invariant_3",
    "determinism_run",
    "execute_scenario",
    "generate_workload",
    "load_scenario",
    "run_scenario",
    "scenario_from_dict",
    "write_outputs",
]
