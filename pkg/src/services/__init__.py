"""Services package: PLC logic, plant simulation, provenance, policies and detection."""

from .detector import Report, detect, explain
from .logic import PlcProgram, scan, typecheck_program
from .plant import AttackScript, run_simulation
from .policy import check_policy, parse_policies
from .provenance import Level, ProvGraph, build_graph
from .scenarios import ScenarioBundle, list_scenarios, load_scenario, run_pipeline
from .trace import TraceLog, parse_trace, read_trace

__all__ = [
    "AttackScript",
    "Level",
    "PlcProgram",
    "ProvGraph",
    "Report",
    "ScenarioBundle",
    "TraceLog",
    "build_graph",
    "check_policy",
    "detect",
    "explain",
    "list_scenarios",
    "load_scenario",
    "parse_policies",
    "parse_trace",
    "read_trace",
    "run_pipeline",
    "run_simulation",
    "scan",
    "typecheck_program",
]
