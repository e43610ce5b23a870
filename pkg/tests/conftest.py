"""Pytest configuration and fixtures."""

import json
import os
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

import pytest
from hypothesis import HealthCheck, settings

# Add src directory to Python path for test imports
# This allows tests to import modules the same way the installed CLI does
src_path = os.path.join(os.path.dirname(__file__), "..", "src")
if src_path not in sys.path:
    sys.path.insert(0, src_path)

from models import Topology  # type: ignore  # noqa: E402
from services.scenarios import (  # type: ignore  # noqa: E402
    SCENARIO_ROOT,
    ScenarioBundle,
    load_scenario,
    run_pipeline,
)

settings.register_profile(
    "default",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("thorough", max_examples=200, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

BASE_DIR = SCENARIO_ROOT / "smart_building"


def read_base(name: str) -> Any:
    """Parsed JSON of one file of the smart building base bundle."""
    return json.loads((BASE_DIR / name).read_text(encoding="utf-8"))


# ============================================================================
# Topology fixtures
# ============================================================================


@pytest.fixture()
def topology_data() -> dict[str, Any]:
    """Raw smart building topology; a fresh copy each time so tests can mutate it."""
    return read_base("topology.json")


@pytest.fixture(scope="session")
def topology() -> Topology:
    return Topology.model_validate(read_base("topology.json"))


@pytest.fixture(scope="session")
def catalog(topology: Topology):
    return topology.catalog()


# ============================================================================
# Scenario fixtures
# ============================================================================
# Pipelines are expensive, so every shipped scenario runs at most once per
# session and the results are shared read-only.


@pytest.fixture(scope="session")
def bundle_loader() -> Callable[[str], ScenarioBundle]:
    cache: dict[str, ScenarioBundle] = {}

    def load(name: str) -> ScenarioBundle:
        if name not in cache:
            cache[name] = load_scenario(name)
        return cache[name]

    return load


@pytest.fixture(scope="session")
def pipeline(bundle_loader) -> Callable[[str], tuple]:
    """``pipeline(name)`` returns (trace, micro graph, report) for a shipped scenario."""
    cache: dict[str, tuple] = {}

    def run(name: str) -> tuple:
        if name not in cache:
            cache[name] = run_pipeline(bundle_loader(name))
        return cache[name]

    return run


@pytest.fixture(scope="session")
def benign(pipeline) -> tuple:
    return pipeline("none")


@pytest.fixture(scope="session")
def forged_smoke(pipeline) -> tuple:
    return pipeline("forged_smoke")


@pytest.fixture(scope="session")
def thermostat_conflict(pipeline) -> tuple:
    return pipeline("thermostat_conflict")


@pytest.fixture()
def trace_file(tmp_path: Path, forged_smoke) -> Path:
    """Forged smoke trace written to a temporary JSONL file."""
    path = tmp_path / "trace.jsonl"
    forged_smoke[0].write(path)
    return path
