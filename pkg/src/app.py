"""
plcprov command-line entry point.

    plcprov simulate --scenario forged_smoke --out trace.jsonl
    plcprov check --trace trace.jsonl --report report.json
    plcprov explain --trace trace.jsonl --report report.json --violation V001
    plcprov query --trace trace.jsonl --question q4
    plcprov build --trace trace.jsonl --level macro --out graph.json
    plcprov export --graph graph.json --format dot --out graph.dot

Exit codes: 0 success or no violations, 1 violations found, 2 rejected input.
Logs go to stderr; command output goes to stdout or ``--out``.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

from aws_lambda_powertools import Logger
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from decorators import EXIT_FINDINGS, EXIT_OK, exit_code_contract  # type: ignore
from exceptions import ValidationError  # type: ignore
from helper import SERVICE_NAME, canonical_json, log_level_from_env  # type: ignore
from models import SystemCatalog  # type: ignore
from services.detector import Report, answer_question, detect, explain, render_text  # type: ignore
from services.plant import AttackScript  # type: ignore
from services.policy import parse_policies  # type: ignore
from services.provenance import (  # type: ignore
    Level,
    ProvGraph,
    build_graph,
    check_invariants,
    export_graph,
    load_graph,
)
from services.scenarios import list_scenarios, load_scenario, run_bundle  # type: ignore
from services.trace import read_trace  # type: ignore

load_dotenv()

logger = Logger(
    service=SERVICE_NAME,
    level=log_level_from_env(),
    logger_handler=logging.StreamHandler(sys.stderr),
)

Command = Literal["simulate", "build", "check", "explain", "query", "export"]

# Fields each subcommand cannot run without
REQUIRED: dict[str, tuple[str, ...]] = {
    "simulate": ("scenario",),
    "build": ("trace",),
    "check": ("trace",),
    "explain": ("report", "violation"),
    "query": ("question",),
    "export": (),
}
GRAPH_SOURCED = {"explain", "query", "export"}
# Output formats per subcommand; json means ProvJson for graphs and the report for check
FORMATS: dict[str, tuple[str, ...]] = {
    "build": ("json", "provjson", "dot"),
    "export": ("json", "provjson", "dot"),
    "check": ("json", "text"),
}
OutputFormat = Literal["json", "provjson", "dot", "text"]


# ============================================================================
# Configuration
# ============================================================================


class CliConfig(BaseModel):
    """Validated arguments of one CLI invocation."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command
    scenario: Optional[str] = None
    trace: Optional[Path] = None
    graph: Optional[Path] = None
    policies: Optional[Path] = None
    report: Optional[Path] = None
    attack: Optional[Path] = None
    out: Optional[Path] = None
    dot: Optional[Path] = None
    ticks: Optional[int] = Field(default=None, ge=0)
    seed: Optional[int] = Field(default=None, ge=0)
    level: Level = Level.MICRO
    format: OutputFormat = "json"
    question: Optional[str] = None
    args: dict[str, Union[int, str]] = Field(default_factory=dict)
    violation: Optional[str] = None
    highlight: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_required(self) -> "CliConfig":
        missing = [name for name in REQUIRED[self.command] if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.command} needs --{', --'.join(missing)}")
        if self.command in GRAPH_SOURCED and self.trace is None and self.graph is None:
            raise ValueError(f"{self.command} needs --trace or --graph")
        if self.format not in FORMATS.get(self.command, ("json",)):
            raise ValueError(f"{self.command} does not support --format {self.format}")
        return self


def _query_arg(raw: str) -> tuple[str, Union[int, str]]:
    key, sep, value = raw.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got '{raw}'")
    return key, int(value) if value.lstrip("-").isdigit() else value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plcprov", description="PLC simulation and provenance checks")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="simulation seed; other commands verify it")
    common.add_argument("--out", type=Path, help="output file (default: stdout)")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", parents=[common], help="run a scenario and write its trace")
    simulate.add_argument("--scenario", help=f"one of {', '.join(list_scenarios())} or a bundle path")
    simulate.add_argument("--ticks", type=int)
    simulate.add_argument("--attack", type=Path, help="attack script replacing the scenario's")

    build = sub.add_parser("build", parents=[common], help="build a provenance graph from a trace")
    build.add_argument("--trace", type=Path)
    build.add_argument("--level", choices=[level.value for level in Level], default="micro")
    build.add_argument("--format", choices=FORMATS["build"], default="json")

    check = sub.add_parser("check", parents=[common], help="evaluate policies over a trace")
    check.add_argument("--trace", type=Path)
    check.add_argument("--policies", type=Path, help="default: the policies of the trace's scenario")
    check.add_argument("--report", type=Path, help="report file (default: stdout)")
    check.add_argument(
        "--format", choices=FORMATS["check"], default="json", help="text prints the human-readable report"
    )

    for name, help_text in (
        ("explain", "narrate one violation of a report"),
        ("query", "answer an administrator question"),
        ("export", "serialize a provenance graph"),
    ):
        command = sub.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--trace", type=Path)
        command.add_argument("--graph", type=Path, help="ProvJson graph instead of a trace")
        if name == "explain":
            command.add_argument("--report", type=Path)
            command.add_argument("--violation")
            command.add_argument("--dot", type=Path, help="write the explanation subgraph here")
        elif name == "query":
            command.add_argument("--question", help="q1..q6")
            command.add_argument("--arg", dest="args", type=_query_arg, action="append", default=[])
        else:
            command.add_argument("--level", choices=[level.value for level in Level], default="micro")
            command.add_argument("--format", choices=FORMATS["export"], default="json")
            command.add_argument("--highlight", action="append", default=[])
    return parser


# ============================================================================
# Shared plumbing
# ============================================================================


def _emit(data: Union[str, bytes], out: Optional[Path]) -> None:
    text = data.decode("ascii") if isinstance(data, bytes) else data
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="ascii")
        logger.info("Output written", extra={"path": str(out), "bytes": len(text)})


def _check_seed(config: CliConfig, seed: Any) -> None:
    if config.seed is not None and config.seed != seed:
        raise ValidationError(
            "Seed does not match the input", details={"expected": config.seed, "found": seed}
        )


def _graph(config: CliConfig, level: Optional[Level] = None) -> ProvGraph:
    wanted = level or config.level
    if config.graph is not None:
        g = load_graph(config.graph.read_bytes())
        if g.level != wanted:
            raise ValidationError(
                "Graph has the wrong level", details={"expected": wanted.value, "found": g.level.value}
            )
    else:
        g = build_graph(read_trace(config.trace), wanted)
    _check_seed(config, g.meta.get("seed"))
    return g


def _graph_format(config: CliConfig) -> str:
    return "dot" if config.format == "dot" else "provjson"


def _policies(config: CliConfig, catalog: SystemCatalog, scenario: str) -> list[Any]:
    if config.policies is not None:
        try:
            doc = json.loads(config.policies.read_text(encoding="utf-8"))
        except json.JSONDecodeError as ex:
            raise ValidationError(
                "Policy file is not valid JSON", details={"line": ex.lineno, "error": ex.msg}
            ) from ex
        return parse_policies(doc, catalog)
    if scenario in list_scenarios():
        logger.info("Using the scenario's policies", extra={"scenario": scenario})
        return load_scenario(scenario).policies
    raise ValidationError("No policies given and the trace names no shipped scenario")


# ============================================================================
# Commands
# ============================================================================


@exit_code_contract
def cmd_simulate(config: CliConfig) -> int:
    """Run a scenario bundle and write the trace as JSON lines."""
    bundle = load_scenario(config.scenario)
    attack = None
    if config.attack is not None:
        attack = AttackScript.model_validate_json(config.attack.read_text(encoding="utf-8"))
    trace = run_bundle(bundle, ticks=config.ticks, seed=config.seed, attack=attack)
    _emit(trace.dumps(), config.out)
    logger.info(
        "Simulation finished",
        extra={"scenario": bundle.name, "ticks": trace.header.ticks, "records": len(trace.records)},
    )
    return EXIT_OK


@exit_code_contract
def cmd_build(config: CliConfig) -> int:
    """Build the provenance graph of a trace and write it as ProvJson or dot."""
    g = _graph(config)
    issues = check_invariants(g)
    if issues:
        logger.warning("Graph invariants violated", extra={"issues": issues})
    _emit(export_graph(g, _graph_format(config)), config.out)
    logger.info("Graph built", extra={"level": g.level.value, "nodes": len(g), "edges": len(g.edges())})
    return EXIT_OK


@exit_code_contract
def cmd_check(config: CliConfig) -> int:
    """Evaluate policies over a trace; exit 1 when anything is violated."""
    trace = read_trace(config.trace)
    _check_seed(config, trace.header.seed)
    g = build_graph(trace, Level.MICRO)
    report = detect(g, _policies(config, trace.catalog, trace.header.scenario))
    as_text = config.format == "text"
    if config.report is not None or not as_text:
        _emit(report.dumps(), config.report)
    if as_text:
        _emit(render_text(report, g), config.out)
    return EXIT_FINDINGS if report.violations else EXIT_OK


@exit_code_contract
def cmd_explain(config: CliConfig) -> int:
    """Print the causal narrative of one violation."""
    report = Report.model_validate_json(config.report.read_text(encoding="utf-8"))
    g = _graph(config, Level.MICRO)
    explanation = explain(report, config.violation, g)
    lines = [f"{explanation.violation_id}:"]
    lines.extend(
        f"  {index}. {step.label} [{step.type}]"
        for index, step in enumerate(explanation.narrative, start=1)
    )
    _emit("\n".join(lines) + "\n", config.out)
    if config.dot is not None:
        _emit(explanation.dot, config.dot)
    return EXIT_OK


@exit_code_contract
def cmd_query(config: CliConfig) -> int:
    """Answer one of the questions q1..q6 as JSON."""
    g = _graph(config, Level.MICRO)
    answer = answer_question(g, config.question, **config.args)
    _emit(canonical_json(answer, indent=2) + "\n", config.out)
    return EXIT_OK


@exit_code_contract
def cmd_export(config: CliConfig) -> int:
    """Serialize a graph as ProvJson or dot."""
    g = _graph(config)
    _emit(export_graph(g, _graph_format(config), highlight=config.highlight), config.out)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "build": cmd_build,
    "check": cmd_check,
    "explain": cmd_explain,
    "query": cmd_query,
    "export": cmd_export,
}


@exit_code_contract
def run(values: dict[str, Any]) -> int:
    config = CliConfig.model_validate(values)
    logger.debug("Command configured", extra={"config": config.model_dump(mode="json")})
    return COMMANDS[config.command](config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv`` and run the selected command.

    Returns:
        The exit code (argparse usage errors exit 2 on their own)
    """
    namespace = build_parser().parse_args(argv)
    values = {key: value for key, value in vars(namespace).items() if value is not None}
    if "args" in values:
        values["args"] = dict(values["args"])
    return run(values)


if __name__ == "__main__":
    sys.exit(main())
