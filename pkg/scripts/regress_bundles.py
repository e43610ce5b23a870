#!/usr/bin/env python3
"""
Scenario Regression Runner

Runs every shipped scenario bundle end to end and compares the violated
policies against the bundle's expected findings. Each bundle is simulated
twice so a nondeterministic trace is caught as well.

Usage:
    python scripts/regress_bundles.py

Optional .env settings:
    PLCPROV_SCENARIOS=forged_smoke,fire_drill   # subset to run (default: all)
    PLCPROV_REGRESS_OUT=regress                 # also write trace and report per bundle
"""

import os
import sys
from pathlib import Path

from aws_lambda_powertools import Logger
from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from exceptions import AppException, describe_error  # type: ignore  # noqa: E402
from helper import SERVICE_NAME, log_level_from_env  # type: ignore  # noqa: E402
from services.provenance import Level, build_graph, check_invariants  # type: ignore  # noqa: E402
from services.scenarios import (  # type: ignore  # noqa: E402
    findings_of,
    list_scenarios,
    load_scenario,
    run_bundle,
    run_pipeline,
)


def _selected() -> list[str]:
    wanted = os.getenv("PLCPROV_SCENARIOS", "")
    names = [name.strip() for name in wanted.split(",") if name.strip()]
    return names or list_scenarios()


def _regress(name: str, out_dir: Path | None) -> list[str]:
    """Problems found for one bundle; empty when it behaves as expected."""
    bundle = load_scenario(name)
    trace, micro, report = run_pipeline(bundle)
    problems = []

    found, expected = findings_of(report), bundle.expected_findings
    if found != expected:
        missing = ", ".join(sorted(expected - found)) or "-"
        extra = ", ".join(sorted(found - expected)) or "-"
        problems.append(f"findings differ (missing: {missing}; unexpected: {extra})")

    if run_bundle(bundle).dumps() != trace.dumps():
        problems.append("second run produced a different trace")

    macro = build_graph(trace, Level.MACRO)
    for level, issues in (("micro", check_invariants(micro)), ("macro", check_invariants(macro))):
        problems.extend(f"{level}: {issue}" for issue in issues[:5])

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace.write(out_dir / f"{name}.jsonl")
        (out_dir / f"{name}.report.json").write_text(report.dumps(), encoding="ascii")
    return problems


def main() -> None:
    """Load .env and regress the selected bundles."""
    load_dotenv()
    Logger(service=SERVICE_NAME, level=log_level_from_env("warning"))
    out = os.getenv("PLCPROV_REGRESS_OUT")
    out_dir = Path(out) if out else None

    failed = 0
    for name in _selected():
        try:
            problems = _regress(name, out_dir)
        except AppException as e:
            problems = [describe_error(e)]
        if problems:
            failed += 1
            print("❌ " + name)
            for problem in problems:
                print("   " + problem)
        else:
            print("✅ " + name)

    print(f"\n{failed} of {len(_selected())} bundles failed")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
