"""
Detector and Report Module

Runs the policies over a provenance graph, turns matches into ranked
violations with causal explanations, and answers the administrator
questions:

    q1  Has an actuator been actuated more than once at the same time?
    q2  Were those commands the same or different?
    q3  What are the reasons behind conflicting actions?
    q4  Which sensors influence the conflicting commands?
    q5  Has a sensor gone beyond its normal range, how often and how long?
    q6  Were more than two actions affecting the same feature at once?
"""

from typing import Any, Optional, Sequence

from aws_lambda_powertools import Logger
from pydantic import Field

from exceptions import NotFoundError, PolicyEvaluationError, ValidationError  # type: ignore
from helper import SERVICE_NAME, canonical_json, value_repr  # type: ignore
from models import StrictModel  # type: ignore
from services.policy import (  # type: ignore
    SEVERITY_RANK,
    ConflictingCommands,
    DuplicateActuation,
    FeatureContention,
    PolicyMatch,
    RangeExcursion,
    Severity,
    check_policy,
)
from services.provenance import (  # type: ignore
    Level,
    NodeType,
    ProvGraph,
    ancestor_ids,
    causal_path,
    derivation_ancestors,
    derived_dependents,
    export_graph,
    influencing_sensors,
)

logger = Logger(service=SERVICE_NAME, child=True)

REPORT_FORMAT = "plcprov-report"
REPORT_VERSION = 1
QUESTIONS = ("q1", "q2", "q3", "q4", "q5", "q6")


class Violation(StrictModel):
    id: str
    policy_id: str
    kind: str
    severity: Severity
    tick_span: tuple[int, int]
    witness: list[str]
    impact: list[str] = Field(default_factory=list)
    explanation: list[str] = Field(default_factory=list)
    narrative: list[str] = Field(default_factory=list)
    details: dict[str, Any] = Field(default_factory=dict)


class QuestionAnswers(StrictModel):
    q1: dict[str, Any] = Field(default_factory=dict)
    q2: dict[str, Any] = Field(default_factory=dict)
    q3: dict[str, Any] = Field(default_factory=dict)
    q4: dict[str, Any] = Field(default_factory=dict)
    q5: dict[str, Any] = Field(default_factory=dict)
    q6: dict[str, Any] = Field(default_factory=dict)


class Report(StrictModel):
    format: str = REPORT_FORMAT
    version: int = REPORT_VERSION
    scenario: str = ""
    scenario_hash: str = ""
    seed: int = 0
    ticks: int = 0
    violations: list[Violation] = Field(default_factory=list)
    question_answers: QuestionAnswers = Field(default_factory=QuestionAnswers)
    counts: dict[str, Any] = Field(default_factory=dict)
    durations: dict[str, int] = Field(default_factory=dict)
    config_errors: list[str] = Field(default_factory=list)

    def violation(self, violation_id: str) -> Violation:
        for violation in self.violations:
            if violation.id == violation_id:
                return violation
        raise NotFoundError("Violation not found", resource_type="Violation", resource_id=violation_id)

    def dumps(self) -> str:
        return canonical_json(self.model_dump(mode="json"), indent=2) + "\n"


class NarrativeStep(StrictModel):
    id: str
    type: str
    label: str


class Explanation(StrictModel):
    violation_id: str
    narrative: list[NarrativeStep]
    dot: str


# ============================================================================
# Impact and narratives
# ============================================================================


def _by_order(g: ProvGraph, ids: Any) -> list[str]:
    return sorted(ids, key=lambda n: (g.node(n).order_key, n))


def impact_of(g: ProvGraph, witness: Sequence[str]) -> list[str]:
    """Commands affected by the witness nodes."""
    impacted: set[str] = set()
    for node_id in witness:
        node = g.node(node_id)
        if node.type == NodeType.COMMAND:
            impacted.add(node_id)
        elif node.type == NodeType.ACTUATION:
            impacted.update(g.targets(node_id, "used"))
        else:
            impacted.update(
                d for d in derived_dependents(g, node_id) if g.node(d).type == NodeType.COMMAND
            )
    return _by_order(g, impacted)


def _earliest_reading(g: ProvGraph, command: str, allowed: Optional[set[str]] = None) -> Optional[str]:
    for pool in (derivation_ancestors(g, command), ancestor_ids(g, command)):
        readings = [n for n in pool if g.node(n).type == NodeType.READING]
        if allowed is not None:
            readings = [n for n in readings if n in allowed]
        if readings:
            return _by_order(g, readings)[0]
    return None


def narrative_for(g: ProvGraph, witness: Sequence[str], impact: Sequence[str]) -> list[str]:
    """
    Causal chain from the earliest relevant reading to an impacted command.

    Commands reached through an inter-PLC message are preferred, since those
    chains cross controller boundaries.
    """
    witness_readings = {n for n in witness if g.node(n).type == NodeType.READING}
    paths = []
    for target in impact:
        source = _earliest_reading(g, target, witness_readings or None)
        if source is None:
            continue
        path = causal_path(g, target, source)
        if path:
            paths.append(path)
    for path in paths:
        if any(g.node(n).type == NodeType.MESSAGE for n in path):
            return path
    if paths:
        return paths[0]
    return [_by_order(g, witness)[0]] if witness else []


def explanation_of(g: ProvGraph, nodes: Sequence[str]) -> list[str]:
    closure: set[str] = set()
    for node_id in nodes:
        closure.add(node_id)
        closure.update(ancestor_ids(g, node_id))
    return _by_order(g, closure)


# ============================================================================
# Questions
# ============================================================================


def _labels(g: ProvGraph, ids: Sequence[str]) -> list[str]:
    return [g.node(n).label for n in ids]


def _duplicate_groups(g: ProvGraph, window: int) -> list[PolicyMatch]:
    found = []
    for actuator in sorted(g.catalog.actuators):
        policy = DuplicateActuation(id=f"q-{actuator}", actuator=actuator, within_ticks=window)
        found.extend(check_policy(g, policy))
    return found


def _conflict_groups(g: ProvGraph, window: int, actuator: Optional[str]) -> list[PolicyMatch]:
    found = []
    for name in sorted(g.catalog.actuators):
        if actuator is None or name == actuator:
            policy = ConflictingCommands(id=f"q-{name}", actuator=name, within_ticks=window)
            found.extend(check_policy(g, policy))
    return found


def answer_question(g: ProvGraph, question: str, **args: Any) -> dict[str, Any]:
    """
    Answer one administrator question from the graph alone.

    Args:
        g: Micro-level graph
        question: One of q1..q6
        **args: window (q1-q4, default 1), actuator (q3, q4), min_duration (q5, default 1),
            max_concurrent (q6, default 2)

    Raises:
        ValidationError: If the question id is unknown
    """
    window = int(args.get("window") or 1)
    actuator = args.get("actuator")
    if question == "q1":
        groups = _duplicate_groups(g, window)
        return {
            "answer": bool(groups),
            "groups": [
                {"actuator": m.details["actuator"], "tick_span": list(m.tick_span), "commands": m.witness}
                for m in groups
            ],
        }
    if question == "q2":
        groups = _duplicate_groups(g, window)
        return {
            "groups": [
                {
                    "actuator": m.details["actuator"],
                    "tick_span": list(m.tick_span),
                    "classification": m.details["classification"],
                    "values": m.details["values"],
                }
                for m in groups
            ],
        }
    if question == "q3":
        reasons = []
        for m in _conflict_groups(g, window, actuator):
            commands = []
            for command_id in m.witness:
                command = g.node(command_id)
                chain = narrative_for(g, [command_id], [command_id])
                commands.append(
                    {
                        "command": command_id,
                        "value": command.value,
                        "plc": command.plc,
                        "rule": command.rule,
                        "narrative": _labels(g, chain),
                    }
                )
            reasons.append(
                {"actuator": m.details["actuator"], "tick_span": list(m.tick_span), "commands": commands}
            )
        return {"conflicts": reasons}
    if question == "q4":
        per_command = {}
        for m in _conflict_groups(g, window, actuator):
            for command_id in m.witness:
                per_command[command_id] = sorted(influencing_sensors(g, command_id))
        sensors = sorted({s for found in per_command.values() for s in found})
        return {"sensors": sensors, "commands": per_command}
    if question == "q5":
        min_duration = int(args.get("min_duration") or 1)
        excursions = {}
        for sensor, info in sorted(g.catalog.sensors.items()):
            if info.normal_range is None:
                continue
            policy = RangeExcursion(id=f"q-{sensor}", sensor=sensor, min_duration_ticks=min_duration)
            runs = check_policy(g, policy)
            if runs:
                excursions[sensor] = {
                    "count": len(runs),
                    "total_duration_ticks": sum(m.details["duration_ticks"] for m in runs),
                    "runs": [
                        {"tick_span": list(m.tick_span), "duration_ticks": m.details["duration_ticks"]}
                        for m in runs
                    ],
                }
        return {"total": sum(e["count"] for e in excursions.values()), "sensors": excursions}
    if question == "q6":
        max_concurrent = int(args.get("max_concurrent") or 2)
        ticks = []
        for feature in sorted(g.catalog.features):
            policy = FeatureContention(id=f"q-{feature}", feature=feature, max_concurrent=max_concurrent)
            for m in check_policy(g, policy):
                ticks.append(
                    {"feature": feature, "tick": m.tick_span[0], "actuators": m.details["actuators"]}
                )
        return {"answer": bool(ticks), "contention": ticks}
    raise ValidationError("Unknown question", details={"question": question, "known": list(QUESTIONS)})


# ============================================================================
# Detection
# ============================================================================


def _match_key(m: PolicyMatch) -> tuple:
    return (m.policy_id, m.tick_span, m.witness)


def detect(g: ProvGraph, policies: Sequence[Any], config_errors: Sequence[str] = ()) -> Report:
    """
    Evaluate every policy and assemble the report.

    Matches with an identical (policy, witness) pair are merged and the merge
    is logged; nothing else is dropped. Policies that cannot be evaluated are
    reported as config errors.

    Raises:
        ValidationError: If the graph is not micro-level
    """
    if g.level != Level.MICRO:
        raise ValidationError("Detection needs a micro-level graph", details={"level": g.level.value})
    errors = list(config_errors)
    severities = {p.id: p.severity for p in policies}
    seen: dict[tuple, PolicyMatch] = {}
    for policy in policies:
        try:
            matches = check_policy(g, policy)
        except PolicyEvaluationError as ex:
            logger.warning("Policy not evaluated", extra={"policy_id": ex.policy_id, "reason": ex.message})
            errors.append(f"{ex.policy_id}: {ex.message}")
            continue
        for match in matches:
            key = (match.policy_id, tuple(match.witness))
            if key in seen:
                logger.info(
                    "Merged duplicate match",
                    extra={"policy_id": match.policy_id, "tick_span": match.tick_span},
                )
                continue
            seen[key] = match

    violations = []
    for index, match in enumerate(sorted(seen.values(), key=_match_key), start=1):
        impact = impact_of(g, match.witness)
        violations.append(
            Violation(
                id=f"V{index:03d}",
                policy_id=match.policy_id,
                kind=match.kind,
                severity=severities[match.policy_id],
                tick_span=match.tick_span,
                witness=match.witness,
                impact=impact,
                explanation=explanation_of(g, [*match.witness, *impact]),
                narrative=narrative_for(g, match.witness, impact),
                details=match.details,
            )
        )

    by_policy: dict[str, int] = {}
    by_severity = {severity.value: 0 for severity in sorted(Severity, key=SEVERITY_RANK.get)}
    durations: dict[str, int] = {}
    for violation in violations:
        by_policy[violation.policy_id] = by_policy.get(violation.policy_id, 0) + 1
        by_severity[violation.severity.value] += 1
        if violation.kind == "range_excursion":
            spent = violation.details["duration_ticks"]
            durations[violation.policy_id] = durations.get(violation.policy_id, 0) + spent

    answers = QuestionAnswers(**{q: answer_question(g, q) for q in QUESTIONS})
    meta = g.meta
    logger.info(
        "Detection finished",
        extra={"violations": len(violations), "policies": len(policies), "config_errors": len(errors)},
    )
    return Report(
        scenario=meta.get("scenario", ""),
        scenario_hash=meta.get("scenario_hash", ""),
        seed=meta.get("seed", 0),
        ticks=meta.get("ticks", 0),
        violations=violations,
        question_answers=answers,
        counts={"violations": len(violations), "by_policy": by_policy, "by_severity": by_severity},
        durations=durations,
        config_errors=errors,
    )


def explain(report: Report, violation_id: str, g: ProvGraph) -> Explanation:
    """
    Narrative and dot rendering of one violation.

    Raises:
        NotFoundError: If the violation is not in the report
    """
    violation = report.violation(violation_id)
    narrative = [
        NarrativeStep(id=n, type=g.node(n).type.value, label=g.node(n).label) for n in violation.narrative
    ]
    dot = export_graph(g.subgraph(violation.explanation), "dot", highlight=violation.witness)
    return Explanation(violation_id=violation_id, narrative=narrative, dot=dot.decode("ascii"))


def render_text(report: Report, g: Optional[ProvGraph] = None) -> str:
    """Human-readable report. Node labels are used when the graph is supplied."""

    def show(node_id: str) -> str:
        return g.node(node_id).label if g is not None and node_id in g else node_id

    lines = [
        f"Report for scenario '{report.scenario or '-'}' (seed {report.seed}, {report.ticks} ticks)",
        f"Violations: {len(report.violations)}",
    ]
    for v in report.violations:
        lines.append(
            f"  {v.id} [{v.severity.value}] {v.policy_id} ({v.kind})"
            f" ticks {v.tick_span[0]}..{v.tick_span[1] - 1}"
        )
        more = f" (+{len(v.witness) - 5} more)" if len(v.witness) > 5 else ""
        lines.append(f"      witness: {', '.join(show(n) for n in v.witness[:5])}{more}")
        if v.narrative:
            lines.append(f"      chain:   {' -> '.join(show(n) for n in v.narrative)}")
    answers = report.question_answers
    lines.append("Questions:")
    q1 = "yes" if answers.q1.get("answer") else "no"
    lines.append(f"  q1 duplicate actuation: {q1} ({len(answers.q1.get('groups', []))} groups)")
    for group in answers.q2.get("groups", []):
        values = ", ".join(value_repr(v) for v in group["values"])
        lines.append(
            f"  q2 {group['actuator']} ticks {group['tick_span']}:"
            f" {group['classification']} ({values})"
        )
    lines.append(f"  q3 conflicts explained: {len(answers.q3.get('conflicts', []))}")
    lines.append(f"  q4 influencing sensors: {', '.join(answers.q4.get('sensors', [])) or 'none'}")
    lines.append(f"  q5 range excursions: {answers.q5.get('total', 0)}")
    for sensor, info in answers.q5.get("sensors", {}).items():
        lines.append(f"     {sensor}: {info['count']} times, {info['total_duration_ticks']} ticks")
    q6 = "yes" if answers.q6.get("answer") else "no"
    lines.append(f"  q6 feature contention: {q6} ({len(answers.q6.get('contention', []))} ticks)")
    for error in report.config_errors:
        lines.append(f"Config error: {error}")
    return "\n".join(lines) + "\n"
