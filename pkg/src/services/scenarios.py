"""
Scenario Kit Module

Loads scenario bundles: a base system directory (topology, programs, plant
parameters, policies) plus a scenario manifest naming the run length, seed,
attack, disturbances, operator actions and the policy ids expected to fire.
Bundles are validated end to end at load time.
"""

import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

from aws_lambda_powertools import Logger
from pydantic import ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from exceptions import ConfigurationError, NotFoundError  # type: ignore
from helper import SERVICE_NAME, canonical_json, content_hash  # type: ignore
from models import StrictModel, Topology, validate_topology  # type: ignore
from services.detector import Report, detect  # type: ignore
from services.logic import PlcProgram, typecheck_program  # type: ignore
from services.plant import (  # type: ignore
    AttackScript,
    Disturbance,
    OperatorAction,
    PlantParams,
    check_attack_script,
    check_run_inputs,
    run_simulation,
)
from services.policy import parse_policies  # type: ignore
from services.provenance import Level, ProvGraph, build_graph  # type: ignore
from services.trace import TraceLog  # type: ignore

logger = Logger(service=SERVICE_NAME, child=True)

SCENARIO_ROOT = Path(__file__).resolve().parent.parent / "scenarios"
MANIFEST = "scenario.json"


class ProgramsDocument(StrictModel):
    format: Literal["plcprov-programs"] = "plcprov-programs"
    version: Literal[1] = 1
    programs: list[PlcProgram] = Field(default_factory=list)


class ScenarioManifest(StrictModel):
    format: Literal["plcprov-scenario"] = "plcprov-scenario"
    version: Literal[1] = 1
    name: str
    description: str = ""
    base: str = "smart_building"
    ticks: int = Field(default=200, ge=0)
    seed: int = Field(default=0, ge=0)
    attack: Optional[AttackScript] = None
    disturbances: list[Disturbance] = Field(default_factory=list)
    operator_actions: list[OperatorAction] = Field(default_factory=list)
    expected_findings: list[str] = Field(default_factory=list)


class ScenarioBundle(StrictModel):
    """A validated, ready-to-run scenario."""

    model_config = ConfigDict(extra="forbid", frozen=True, arbitrary_types_allowed=True)

    manifest: ScenarioManifest
    topology: Topology
    programs: list[PlcProgram]
    plant: PlantParams
    policy_document: dict[str, Any]
    policies: list[Any]
    scenario_hash: str

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def expected_findings(self) -> set[str]:
        return set(self.manifest.expected_findings)


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as ex:
        raise NotFoundError(
            "Bundle file not found", resource_type="File", resource_id=str(path)
        ) from ex
    except json.JSONDecodeError as ex:
        issues = [f"line {ex.lineno}: {ex.msg}"]
        raise ConfigurationError(f"{path.name} is not valid JSON", issues) from ex


def _parse(model: Any, data: Any, path: Path) -> Any:
    try:
        return model.model_validate(data)
    except PydanticValidationError as ex:
        issues = [
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in ex.errors()
        ]
        raise ConfigurationError(f"{path.name} failed schema validation", issues) from ex


def list_scenarios() -> list[str]:
    """Names of the shipped scenarios."""
    return sorted(p.parent.name for p in SCENARIO_ROOT.glob(f"*/{MANIFEST}"))


def _manifest_path(name_or_path: Union[str, Path]) -> Path:
    if str(name_or_path) in list_scenarios():
        return SCENARIO_ROOT / str(name_or_path) / MANIFEST
    path = Path(name_or_path)
    if path.is_dir():
        path = path / MANIFEST
    if path.is_file():
        return path
    raise NotFoundError("Unknown scenario", resource_type="Scenario", resource_id=str(name_or_path))


def load_scenario(name_or_path: Union[str, Path]) -> ScenarioBundle:
    """
    Load and validate a scenario bundle.

    Args:
        name_or_path: Shipped scenario name, a bundle directory or a manifest file

    Returns:
        ScenarioBundle ready for ``run_bundle``

    Raises:
        NotFoundError: If the scenario or one of its files does not exist
        ConfigurationError: If any part fails validation, with every issue listed
    """
    manifest_path = _manifest_path(name_or_path)
    manifest = _parse(ScenarioManifest, _read_json(manifest_path), manifest_path)
    base_dir = manifest_path.parent.parent / manifest.base
    if not base_dir.is_dir():
        base_dir = SCENARIO_ROOT / manifest.base

    topology_path = base_dir / "topology.json"
    topology = _parse(Topology, _read_json(topology_path), topology_path)
    errors = validate_topology(topology)
    if errors:
        raise ConfigurationError(f"Topology '{manifest.base}' failed validation", errors)

    programs_path = base_dir / "programs.json"
    programs = _parse(ProgramsDocument, _read_json(programs_path), programs_path).programs
    plant_path = base_dir / "plant.json"
    plant = _parse(PlantParams, _read_json(plant_path), plant_path)

    issues: list[Any] = []
    for program in programs:
        issues.extend(typecheck_program(program, topology))
    if manifest.attack is not None:
        issues.extend(check_attack_script(manifest.attack, topology, manifest.ticks))
    issues.extend(check_run_inputs(topology, manifest.disturbances, manifest.operator_actions))
    if issues:
        raise ConfigurationError(f"Scenario '{manifest.name}' failed validation", issues)

    policy_document = _read_json(base_dir / "policies.json")
    policies = parse_policies(policy_document, topology.catalog())
    known = {p.id for p in policies}
    unknown = sorted(set(manifest.expected_findings) - known)
    if unknown:
        raise ConfigurationError(
            f"Scenario '{manifest.name}' expects unknown policies",
            [f"unknown policy '{u}'" for u in unknown],
        )

    scenario_hash = content_hash(
        manifest.model_dump(mode="json"),
        topology.model_dump(mode="json"),
        [p.model_dump(mode="json") for p in programs],
        plant.model_dump(mode="json"),
        policy_document,
        size=16,
    )
    logger.info(
        "Scenario loaded", extra={"scenario": manifest.name, "scenario_hash": scenario_hash}
    )
    return ScenarioBundle(
        manifest=manifest,
        topology=topology,
        programs=programs,
        plant=plant,
        policy_document=policy_document,
        policies=policies,
        scenario_hash=scenario_hash,
    )


def run_bundle(
    bundle: ScenarioBundle,
    *,
    ticks: Optional[int] = None,
    seed: Optional[int] = None,
    attack: Optional[AttackScript] = None,
) -> TraceLog:
    """Simulate a bundle. Explicit arguments override the manifest."""
    manifest = bundle.manifest
    return run_simulation(
        bundle.topology,
        bundle.programs,
        ticks=manifest.ticks if ticks is None else ticks,
        seed=manifest.seed if seed is None else seed,
        attack=attack if attack is not None else manifest.attack,
        plant=bundle.plant,
        disturbances=manifest.disturbances,
        operator_actions=manifest.operator_actions,
        scenario_name=manifest.name,
        scenario_hash=bundle.scenario_hash,
    )


def run_pipeline(bundle: ScenarioBundle) -> tuple[TraceLog, ProvGraph, Report]:
    """Simulate, build the micro graph and detect with the bundle's policies."""
    trace = run_bundle(bundle)
    g = build_graph(trace, Level.MICRO)
    return trace, g, detect(g, bundle.policies)


def findings_of(report: Report) -> set[str]:
    return {v.policy_id for v in report.violations}


def dump_manifest(bundle: ScenarioBundle) -> str:
    return canonical_json(bundle.manifest.model_dump(mode="json"), indent=2) + "\n"
