"""
Policy Engine Module

Declarative safety and security policies evaluated over a micro-level
provenance graph. Each check is a pure function of (graph, policy) and
returns its matches in tick order.

Usage:
    policies = parse_policies(json.loads(text), trace.catalog)
    matches = [m for p in policies for m in check_policy(g, p)]
"""

from enum import Enum
from typing import Annotated, Any, Literal, Optional, Union

from aws_lambda_powertools import Logger
from pydantic import Field, model_validator
from pydantic import ValidationError as PydanticValidationError

from exceptions import PolicyEvaluationError, PolicyParseError  # type: ignore
from helper import SERVICE_NAME, value_repr  # type: ignore
from models import (  # type: ignore
    NUMERIC_TYPES,
    Comparison,
    Identifier,
    SignalValue,
    StrictModel,
    SystemCatalog,
    compare_signal,
    value_matches,
    values_equal,
)
from services.provenance import (  # type: ignore
    Level,
    NodeType,
    ProvGraph,
    ProvNode,
    derivation_ancestors,
)

logger = Logger(service=SERVICE_NAME, child=True)

POLICY_FORMAT = "plcprov-policy"
POLICY_VERSION = 1


class Severity(str, Enum):
    INFO = "info"
    WARNING = "warning"
    CRITICAL = "critical"


SEVERITY_RANK = {Severity.CRITICAL: 0, Severity.WARNING: 1, Severity.INFO: 2}


# ============================================================================
# Predicates
# ============================================================================


class ValuePredicate(StrictModel):
    """``value <op> operand``; ``in`` uses ``values``."""

    op: Comparison
    value: Optional[SignalValue] = None
    values: Optional[list[SignalValue]] = None

    @model_validator(mode="after")
    def check_operand(self) -> "ValuePredicate":
        if self.op == Comparison.IN and not self.values:
            raise ValueError("'in' needs a non-empty values list")
        if self.op != Comparison.IN and self.value is None:
            raise ValueError(f"'{self.op.value}' needs a value")
        return self

    @property
    def operand(self) -> Any:
        return self.values if self.op == Comparison.IN else self.value

    def holds(self, value: Any) -> bool:
        try:
            return compare_signal(self.op, value, self.operand)
        except TypeError:
            return False


class RisePredicate(StrictModel):
    """Value grew by at least ``rise`` over the last ``over_ticks`` ticks."""

    rise: float
    over_ticks: Optional[int] = Field(default=None, ge=1)


class ReadingCondition(ValuePredicate):
    """Some ancestor reading of ``sensor`` satisfies the predicate, optionally from ``origin``."""

    sensor: Identifier
    origin: Optional[Identifier] = None

    def holds_for(self, node: ProvNode) -> bool:
        return (
            node.type == NodeType.READING
            and node.device == self.sensor
            and (self.origin is None or node.origin == self.origin)
            and self.holds(node.value)
        )


class OperatorCondition(StrictModel):
    operator: Literal[True]


class Permit(StrictModel):
    any_of: list[Union[ReadingCondition, OperatorCondition]] = Field(default_factory=list)


# ============================================================================
# Policies
# ============================================================================


class PolicyBase(StrictModel):
    id: Identifier
    severity: Severity = Severity.WARNING
    description: str = ""


class DuplicateActuation(PolicyBase):
    kind: Literal["duplicate_actuation"] = "duplicate_actuation"
    actuator: Identifier
    within_ticks: int = Field(default=1, ge=1)


class ConflictingCommands(PolicyBase):
    kind: Literal["conflicting_commands"] = "conflicting_commands"
    actuator: Identifier
    within_ticks: int = Field(default=1, ge=1)


class RangeExcursion(PolicyBase):
    kind: Literal["range_excursion"] = "range_excursion"
    sensor: Identifier
    min_duration_ticks: int = Field(default=1, ge=1)


class FeatureContention(PolicyBase):
    kind: Literal["feature_contention"] = "feature_contention"
    feature: Identifier
    max_concurrent: int = Field(default=2, ge=1)


class Guard(PolicyBase):
    kind: Literal["guard"] = "guard"
    actuator: Identifier
    command_value: SignalValue
    permit: Permit


class Correlation(PolicyBase):
    kind: Literal["correlation"] = "correlation"
    trigger_sensor: Identifier
    trigger_predicate: ValuePredicate
    corroborating_sensor: Identifier
    corroborating_predicate: Union[RisePredicate, ValuePredicate]
    window_ticks: int = Field(..., ge=1)


class SourceBinding(PolicyBase):
    kind: Literal["source_binding"] = "source_binding"
    sensor: Identifier
    expected_origin_point: Identifier


Policy = Annotated[
    Union[
        DuplicateActuation,
        ConflictingCommands,
        RangeExcursion,
        FeatureContention,
        Guard,
        Correlation,
        SourceBinding,
    ],
    Field(discriminator="kind"),
]


class PolicyDocument(StrictModel):
    format: Literal["plcprov-policy"] = POLICY_FORMAT
    version: Literal[1] = POLICY_VERSION
    policies: list[Policy] = Field(default_factory=list)


class PolicyMatch(StrictModel):
    """A breach and the node ids proving it. ``tick_span`` is half-open."""

    policy_id: str
    kind: str
    witness: list[str]
    tick_span: tuple[int, int]
    details: dict[str, Any] = Field(default_factory=dict)


# ============================================================================
# Parsing
# ============================================================================


class _CrossCheck:
    """Walk a parsed document against the system catalog."""

    def __init__(self, catalog: SystemCatalog) -> None:
        self.catalog = catalog

    def fail(self, location: str, message: str) -> None:
        raise PolicyParseError(message, location=location)

    def sensor(self, location: str, sensor_id: str):
        info = self.catalog.sensors.get(sensor_id)
        if info is None:
            self.fail(location, f"unknown sensor '{sensor_id}'")
        return info

    def actuator(self, location: str, actuator_id: str):
        info = self.catalog.actuators.get(actuator_id)
        if info is None:
            self.fail(location, f"unknown actuator '{actuator_id}'")
        return info

    def origin(self, location: str, point: Optional[str]) -> None:
        if point is not None and point not in self.catalog.attachment_points:
            self.fail(location, f"unknown origin point '{point}'")

    def predicate(self, location: str, pred: ValuePredicate, sensor_id: str) -> None:
        info = self.sensor(location, sensor_id)
        if pred.op in (Comparison.LT, Comparison.LE, Comparison.GT, Comparison.GE):
            if info.type not in NUMERIC_TYPES:
                message = f"'{pred.op.value}' needs a numeric sensor, '{sensor_id}' is {info.type.value}"
                self.fail(location, message)
        operands = pred.values if pred.op == Comparison.IN else [pred.value]
        for operand in operands:
            if not value_matches(operand, info.type, info.values):
                self.fail(location, f"{operand!r} does not fit sensor '{sensor_id}' ({info.type.value})")

    def policy(self, location: str, p: Any) -> None:
        if isinstance(p, (DuplicateActuation, ConflictingCommands)):
            self.actuator(f"{location}.actuator", p.actuator)
        elif isinstance(p, RangeExcursion):
            info = self.sensor(f"{location}.sensor", p.sensor)
            if info.normal_range is None:
                self.fail(f"{location}.sensor", f"sensor '{p.sensor}' has no normal_range")
        elif isinstance(p, FeatureContention):
            if p.feature not in self.catalog.features:
                self.fail(f"{location}.feature", f"unknown feature '{p.feature}'")
        elif isinstance(p, Guard):
            info = self.actuator(f"{location}.actuator", p.actuator)
            if not any(values_equal(p.command_value, c) for c in info.command_set):
                message = f"{p.command_value!r} is not a command of '{p.actuator}'"
                self.fail(f"{location}.command_value", message)
            for index, cond in enumerate(p.permit.any_of):
                where = f"{location}.permit.any_of[{index}]"
                if isinstance(cond, ReadingCondition):
                    self.predicate(where, cond, cond.sensor)
                    self.origin(f"{where}.origin", cond.origin)
        elif isinstance(p, Correlation):
            self.predicate(f"{location}.trigger_predicate", p.trigger_predicate, p.trigger_sensor)
            where = f"{location}.corroborating_predicate"
            if isinstance(p.corroborating_predicate, RisePredicate):
                info = self.sensor(where, p.corroborating_sensor)
                if info.type not in NUMERIC_TYPES:
                    sensor = p.corroborating_sensor
                    self.fail(where, f"'rise' needs a numeric sensor, '{sensor}' is {info.type.value}")
            else:
                self.predicate(where, p.corroborating_predicate, p.corroborating_sensor)
        elif isinstance(p, SourceBinding):
            self.sensor(f"{location}.sensor", p.sensor)
            if p.expected_origin_point not in self.catalog.attachment_points:
                message = f"unknown origin point '{p.expected_origin_point}'"
                self.fail(f"{location}.expected_origin_point", message)


def parse_policies(doc: Any, catalog: SystemCatalog) -> list[Any]:
    """
    Strictly parse a policy document and cross-check it against the catalog.

    Args:
        doc: Decoded JSON document (an empty object yields no policies)
        catalog: System catalog the policies will run against

    Returns:
        Policies in document order

    Raises:
        PolicyParseError: On unknown kinds or fields, dangling references or mistyped predicates
    """
    try:
        parsed = PolicyDocument.model_validate(doc or {})
    except PydanticValidationError as ex:
        first = ex.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise PolicyParseError(first["msg"], location=location) from ex
    checker = _CrossCheck(catalog)
    seen: set[str] = set()
    for index, policy in enumerate(parsed.policies):
        location = f"policies[{index}]"
        if policy.id in seen:
            raise PolicyParseError(f"duplicate policy id '{policy.id}'", location=f"{location}.id")
        seen.add(policy.id)
        checker.policy(location, policy)
    logger.debug("Policies parsed", extra={"count": len(parsed.policies)})
    return list(parsed.policies)


# ============================================================================
# Checks
# ============================================================================


def _require(g: ProvGraph, policy: Any, table: str, ident: str) -> None:
    if g.level != Level.MICRO:
        raise PolicyEvaluationError("Policies evaluate on micro-level graphs", policy_id=policy.id)
    if ident not in getattr(g.catalog, table):
        raise PolicyEvaluationError(
            f"policy references '{ident}' which the graph does not know", policy_id=policy.id
        )


def _readings(g: ProvGraph, sensor: str) -> list[ProvNode]:
    return [n for n in g.nodes(NodeType.READING) if n.device == sensor]


def _distinct(values: list[Any]) -> list[Any]:
    found: list[Any] = []
    for value in values:
        if not any(values_equal(value, seen) for seen in found):
            found.append(value)
    return found


def _anchored_windows(
    commands: list[ProvNode], within: int, min_values: int = 1
) -> list[tuple[int, list[ProvNode]]]:
    """
    Half-open windows ``[t, t + within)`` anchored at each distinct command tick.

    A window is kept when it holds at least two commands with at least
    ``min_values`` distinct values and its command set is not contained in a
    window kept earlier.
    """
    windows: list[tuple[int, list[ProvNode]]] = []
    kept: list[set[str]] = []
    for anchor in sorted({c.tick for c in commands}):
        members = [c for c in commands if anchor <= c.tick < anchor + within]
        ids = {c.id for c in members}
        if len(members) < 2 or len(_distinct([c.value for c in members])) < min_values:
            continue
        if any(ids <= earlier for earlier in kept):
            continue
        kept.append(ids)
        windows.append((anchor, members))
    return windows


def _command_windows(g: ProvGraph, p: Any, min_values: int = 1) -> list[tuple[int, list[ProvNode]]]:
    _require(g, p, "actuators", p.actuator)
    commands = [n for n in g.nodes(NodeType.COMMAND) if n.device == p.actuator]
    return _anchored_windows(commands, p.within_ticks, min_values)


def _group_match(p: Any, anchor: int, group: list[ProvNode], **details: Any) -> PolicyMatch:
    values = _distinct([c.value for c in group])
    return PolicyMatch(
        policy_id=p.id,
        kind=p.kind,
        witness=[c.id for c in group],
        tick_span=(anchor, anchor + p.within_ticks),
        details={
            "actuator": p.actuator,
            "count": len(group),
            "values": sorted(values, key=value_repr),
            **details,
        },
    )


def check_duplicate_actuation(g: ProvGraph, p: DuplicateActuation) -> list[PolicyMatch]:
    """One match per window of ``within_ticks`` holding at least two commands of the actuator."""
    matches = []
    for anchor, group in _command_windows(g, p):
        same = len(_distinct([c.value for c in group])) == 1
        matches.append(_group_match(p, anchor, group, classification="same" if same else "different"))
    return matches


def classify_conflict(g: ProvGraph, p: ConflictingCommands) -> list[PolicyMatch]:
    """Windows whose commands carry at least two distinct values."""
    return [
        _group_match(p, anchor, group, classification="different")
        for anchor, group in _command_windows(g, p, min_values=2)
    ]


def check_range_excursions(g: ProvGraph, p: RangeExcursion) -> list[PolicyMatch]:
    """Maximal runs of consecutive out-of-range readings lasting at least ``min_duration_ticks``."""
    _require(g, p, "sensors", p.sensor)
    normal_range = g.catalog.sensors[p.sensor].normal_range
    if normal_range is None:
        raise PolicyEvaluationError(f"sensor '{p.sensor}' has no normal_range", policy_id=p.id)
    low, high = normal_range
    runs: list[list[ProvNode]] = []
    for reading in _readings(g, p.sensor):
        outside = reading.value < low or reading.value > high
        if not outside:
            continue
        if runs and runs[-1][-1].tick + 1 == reading.tick:
            runs[-1].append(reading)
        else:
            runs.append([reading])
    matches = []
    for run in runs:
        if len(run) < p.min_duration_ticks:
            continue
        values = [r.value for r in run]
        matches.append(
            PolicyMatch(
                policy_id=p.id,
                kind=p.kind,
                witness=[r.id for r in run],
                tick_span=(run[0].tick, run[-1].tick + 1),
                details={
                    "sensor": p.sensor,
                    "duration_ticks": len(run),
                    "min_value": min(values),
                    "max_value": max(values),
                    "normal_range": [low, high],
                },
            )
        )
    return matches


def check_feature_contention(g: ProvGraph, p: FeatureContention) -> list[PolicyMatch]:
    """Ticks where more than ``max_concurrent`` distinct actuators act on the feature."""
    _require(g, p, "features", p.feature)
    affecting = {a for a, info in g.catalog.actuators.items() if p.feature in info.affects}
    by_tick: dict[int, list[ProvNode]] = {}
    for actuation in g.nodes(NodeType.ACTUATION):
        if actuation.device in affecting:
            by_tick.setdefault(actuation.tick, []).append(actuation)
    matches = []
    for tick, actuations in sorted(by_tick.items()):
        actuators = sorted({a.device for a in actuations})
        if len(actuators) > p.max_concurrent:
            matches.append(
                PolicyMatch(
                    policy_id=p.id,
                    kind=p.kind,
                    witness=sorted(a.id for a in actuations),
                    tick_span=(tick, tick + 1),
                    details={"feature": p.feature, "actuators": actuators, "count": len(actuators)},
                )
            )
    return matches


def permit_holds(g: ProvGraph, p: Guard, command: ProvNode) -> bool:
    """Evaluate the permit over the command's derivation closure."""
    context = derivation_ancestors(g, command.id) | {command.id}
    for cond in p.permit.any_of:
        if isinstance(cond, OperatorCondition):
            if any(g.is_operator_attributed(node) for node in context):
                return True
        elif any(cond.holds_for(g.node(node)) for node in context):
            return True
    return False


def check_guard(g: ProvGraph, p: Guard) -> list[PolicyMatch]:
    """Every ``command_value`` command whose ancestry satisfies no permit condition."""
    _require(g, p, "actuators", p.actuator)
    for cond in p.permit.any_of:
        if isinstance(cond, ReadingCondition) and cond.sensor not in g.catalog.sensors:
            raise PolicyEvaluationError(f"permit references unknown sensor '{cond.sensor}'", policy_id=p.id)
    matches = []
    for command in g.nodes(NodeType.COMMAND):
        if command.device != p.actuator or not values_equal(command.value, p.command_value):
            continue
        if permit_holds(g, p, command):
            continue
        matches.append(
            PolicyMatch(
                policy_id=p.id,
                kind=p.kind,
                witness=[command.id],
                tick_span=(command.tick, command.tick + 1),
                details={
                    "actuator": p.actuator,
                    "command_value": p.command_value,
                    "by": command.by or "plc",
                },
            )
        )
    return matches


def corroborating_ticks(readings: list[ProvNode], predicate: Any, window: int) -> set[int]:
    """Ticks at which the corroborating predicate holds."""
    if isinstance(predicate, ValuePredicate):
        return {r.tick for r in readings if predicate.holds(r.value)}
    over = predicate.over_ticks or window
    by_tick = {r.tick: r.value for r in readings}
    return {
        tick
        for tick, value in by_tick.items()
        if tick - over in by_tick and value - by_tick[tick - over] >= predicate.rise
    }


def check_correlation(g: ProvGraph, p: Correlation) -> list[PolicyMatch]:
    """Trigger readings with no corroborating reading within ``window_ticks`` either side.

    The match spans the whole evidence window around the trigger tick.
    """
    _require(g, p, "sensors", p.trigger_sensor)
    _require(g, p, "sensors", p.corroborating_sensor)
    support = corroborating_ticks(
        _readings(g, p.corroborating_sensor), p.corroborating_predicate, p.window_ticks
    )
    matches = []
    for reading in _readings(g, p.trigger_sensor):
        if not p.trigger_predicate.holds(reading.value):
            continue
        if any(abs(tick - reading.tick) <= p.window_ticks for tick in support):
            continue
        matches.append(
            PolicyMatch(
                policy_id=p.id,
                kind=p.kind,
                witness=[reading.id],
                tick_span=(reading.tick - p.window_ticks, reading.tick + p.window_ticks + 1),
                details={
                    "trigger_sensor": p.trigger_sensor,
                    "value": reading.value,
                    "corroborating_sensor": p.corroborating_sensor,
                    "window_ticks": p.window_ticks,
                },
            )
        )
    return matches


def check_source_binding(g: ProvGraph, p: SourceBinding) -> list[PolicyMatch]:
    """Readings of the sensor attributed to an origin other than the expected one."""
    _require(g, p, "sensors", p.sensor)
    matches = []
    for reading in _readings(g, p.sensor):
        if reading.origin == p.expected_origin_point:
            continue
        matches.append(
            PolicyMatch(
                policy_id=p.id,
                kind=p.kind,
                witness=[reading.id],
                tick_span=(reading.tick, reading.tick + 1),
                details={
                    "sensor": p.sensor,
                    "origin": reading.origin,
                    "expected_origin_point": p.expected_origin_point,
                },
            )
        )
    return matches


CHECKS = {
    "duplicate_actuation": check_duplicate_actuation,
    "conflicting_commands": classify_conflict,
    "range_excursion": check_range_excursions,
    "feature_contention": check_feature_contention,
    "guard": check_guard,
    "correlation": check_correlation,
    "source_binding": check_source_binding,
}


def check_policy(g: ProvGraph, p: Any) -> list[PolicyMatch]:
    """Dispatch to the check for ``p.kind``."""
    matches = CHECKS[p.kind](g, p)
    logger.debug("Policy evaluated", extra={"policy_id": p.id, "matches": len(matches)})
    return matches