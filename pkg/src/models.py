"""Core domain model shared by every service.

Topology, devices, signals and time. All models are strict (unknown keys are
rejected) and frozen, so a loaded topology can be shared by concurrent
readers.
"""

import math
from collections import Counter
from enum import Enum
from functools import cached_property
from typing import Annotated, Any, Union

from pydantic import BaseModel, ConfigDict, Field, StrictBool, StrictFloat, StrictInt, StrictStr
from pydantic import StringConstraints

from exceptions import BoundsError  # type: ignore

IDENTIFIER_PATTERN = r"^[A-Za-z0-9_.\-]+$"

Identifier = Annotated[str, StringConstraints(pattern=IDENTIFIER_PATTERN, min_length=1)]
SignalValue = Union[StrictBool, StrictInt, StrictFloat, StrictStr]

MAX_TICK = 2**40
MAX_MS_PER_TICK = 10**4
MAX_MS = 2**63 - 1


class StrictModel(BaseModel):
    """Base for every document model: unknown keys rejected, immutable."""

    model_config = ConfigDict(extra="forbid", frozen=True)


# ============================================================================
# Enumerations
# ============================================================================


class SignalType(str, Enum):
    BOOL = "bool"
    INT = "int"
    FLOAT = "float"
    ENUM = "enum"


class Direction(str, Enum):
    IN = "in"
    OUT = "out"
    INTERNAL = "internal"


class FeatureKind(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


class Comparison(str, Enum):
    EQ = "eq"
    NE = "ne"
    LT = "lt"
    LE = "le"
    GT = "gt"
    GE = "ge"
    IN = "in"


NUMERIC_TYPES = frozenset({SignalType.INT, SignalType.FLOAT})


# ============================================================================
# Signal values
# ============================================================================


def value_type(value: Any) -> SignalType | None:
    """Infer the signal type carried by a JSON value."""
    if isinstance(value, bool):
        return SignalType.BOOL
    if isinstance(value, int):
        return SignalType.INT
    if isinstance(value, float):
        return SignalType.FLOAT
    if isinstance(value, str):
        return SignalType.ENUM
    return None


def value_matches(value: Any, kind: SignalType, values: list[str] | None = None) -> bool:
    """
    Check a value against a declared type.

    Ints are accepted where floats are declared. Floats must be finite and
    enum values must belong to the declared set when one is given.
    """
    actual = value_type(value)
    if actual is None:
        return False
    if kind == SignalType.FLOAT:
        return actual in NUMERIC_TYPES and math.isfinite(value)
    if kind == SignalType.ENUM:
        return actual == SignalType.ENUM and (values is None or value in values)
    return actual == kind


def values_equal(left: Any, right: Any) -> bool:
    """Equality that keeps bools apart from ints (``True != 1`` here)."""
    if isinstance(left, bool) or isinstance(right, bool):
        return type(left) is type(right) and left == right
    if isinstance(left, str) or isinstance(right, str):
        return isinstance(left, str) and isinstance(right, str) and left == right
    return left == right


def compare_signal(op: Comparison | str, left: Any, right: Any) -> bool:
    """
    Apply a comparison between two signal values.

    ``in`` expects ``right`` to be a list. Ordering comparisons require
    numbers.

    Raises:
        TypeError: If the operands cannot be compared
    """
    op = Comparison(op)
    if op == Comparison.EQ:
        return values_equal(left, right)
    if op == Comparison.NE:
        return not values_equal(left, right)
    if op == Comparison.IN:
        if not isinstance(right, (list, tuple)):
            raise TypeError("'in' needs a list of values")
        return any(values_equal(left, candidate) for candidate in right)
    if value_type(left) not in NUMERIC_TYPES or value_type(right) not in NUMERIC_TYPES:
        raise TypeError(f"cannot order {left!r} and {right!r}")
    if op == Comparison.LT:
        return left < right
    if op == Comparison.LE:
        return left <= right
    if op == Comparison.GT:
        return left > right
    return left >= right


def zero_value(kind: SignalType, values: list[str] | None = None) -> SignalValue:
    if kind == SignalType.BOOL:
        return False
    if kind == SignalType.INT:
        return 0
    if kind == SignalType.FLOAT:
        return 0.0
    return values[0] if values else ""


# ============================================================================
# Time
# ============================================================================


class Timestamp(StrictModel):
    """Simulator step index plus the global tick period."""

    tick: int = Field(..., ge=0, description="Simulator step index")
    ms_per_tick: int = Field(default=100, ge=1, description="Milliseconds per tick")


def timestamp_ms(ts: Timestamp) -> int:
    """
    Convert a Timestamp to milliseconds.

    Raises:
        BoundsError: If tick >= 2^40, ms_per_tick > 10^4 or the product overflows 64 bits
    """
    if ts.tick >= MAX_TICK or ts.ms_per_tick > MAX_MS_PER_TICK:
        raise BoundsError(
            "Timestamp outside supported range",
            details={"tick": ts.tick, "ms_per_tick": ts.ms_per_tick},
        )
    ms = ts.tick * ts.ms_per_tick
    if ms > MAX_MS:
        raise BoundsError("Timestamp overflows 64-bit milliseconds", details={"ms": ms})
    return ms


# ============================================================================
# Topology
# ============================================================================


class VariableSpec(StrictModel):
    """A PLC variable: sensor input, actuator output or internal memory."""

    name: Identifier
    direction: Direction
    type: SignalType
    values: list[str] | None = Field(default=None, description="Declared enum set")
    input_line: str | None = Field(default=None, description="Physical input terminal")
    initial: SignalValue | None = None

    def default(self) -> SignalValue:
        if self.initial is not None:
            return float(self.initial) if self.type == SignalType.FLOAT else self.initial
        return zero_value(self.type, self.values)


class VariableRef(StrictModel):
    plc_id: Identifier
    name: Identifier
    direction: Direction | None = None
    input_line: str | None = None

    @property
    def key(self) -> str:
        return f"{self.plc_id}.{self.name}"


class AttachmentPoint(StrictModel):
    """Network location from which bus traffic may originate."""

    id: Identifier
    zone: str = ""
    description: str = ""


class PlcSpec(StrictModel):
    id: Identifier
    location: Identifier = Field(..., description="Attachment point of the PLC cabinet")
    variables: list[VariableSpec] = Field(default_factory=list)

    def variable(self, name: str) -> VariableSpec | None:
        for var in self.variables:
            if var.name == name:
                return var
        return None


class SensorSpec(StrictModel):
    id: Identifier
    measures: Identifier
    attaches_to: VariableRef
    origin_point: Identifier = Field(..., description="Expected origin of its readings")
    normal_range: tuple[float, float] | None = None
    unit: str = ""
    noise_sigma: float = Field(default=0.0, ge=0.0)


class ActuatorEffect(StrictModel):
    command: SignalValue
    feature: Identifier
    target: SignalValue


class ActuatorSpec(StrictModel):
    id: Identifier
    affects: list[Identifier]
    attaches_to: VariableRef
    command_set: list[SignalValue]
    effects: list[ActuatorEffect] = Field(default_factory=list)

    def targets_for(self, command: Any) -> list[ActuatorEffect]:
        return [eff for eff in self.effects if values_equal(eff.command, command)]


class EnvironmentFeature(StrictModel):
    id: Identifier
    kind: FeatureKind
    unit: str = ""
    initial_value: SignalValue
    values: list[str] | None = None

    def accepts(self, value: Any) -> bool:
        """Whether ``value`` can be a state of this feature: a number if continuous, else bool or enum."""
        if self.kind == FeatureKind.CONTINUOUS:
            return value_matches(value, SignalType.FLOAT)
        return value_type(value) == SignalType.BOOL or value_matches(value, SignalType.ENUM, self.values)


class LinkSpec(StrictModel):
    """Inter-PLC message channel."""

    channel: Identifier
    src: Identifier
    dst: Identifier
    payload: SignalType
    values: list[str] | None = None


class ConfigError(StrictModel):
    """One validation finding: the offending element and the broken rule."""

    element: str
    rule: str
    message: str

    def __str__(self) -> str:
        return f"{self.element}: {self.message} [{self.rule}]"


class SensorInfo(StrictModel):
    plc: str
    variable: str
    feature: str
    origin_point: str
    type: SignalType
    values: list[str] | None = None
    normal_range: tuple[float, float] | None = None
    unit: str = ""


class ActuatorInfo(StrictModel):
    plc: str
    variable: str
    affects: list[str]
    type: SignalType
    values: list[str] | None = None
    command_set: list[SignalValue] = Field(default_factory=list)


class LinkInfo(StrictModel):
    src: str
    dst: str
    payload: SignalType


class SystemCatalog(StrictModel):
    """Self-describing digest of a topology carried by traces and graphs."""

    ms_per_tick: int = 100
    sensors: dict[str, SensorInfo] = Field(default_factory=dict)
    actuators: dict[str, ActuatorInfo] = Field(default_factory=dict)
    features: dict[str, FeatureKind] = Field(default_factory=dict)
    links: dict[str, LinkInfo] = Field(default_factory=dict)
    attachment_points: list[str] = Field(default_factory=list)
    operator_point: str | None = None


class Topology(StrictModel):
    """The full system: PLCs, devices, environment features and channels."""

    name: str = ""
    ms_per_tick: int = Field(default=100, ge=1, le=MAX_MS_PER_TICK)
    attachment_points: list[AttachmentPoint] = Field(default_factory=list)
    plcs: list[PlcSpec] = Field(default_factory=list)
    sensors: list[SensorSpec] = Field(default_factory=list)
    actuators: list[ActuatorSpec] = Field(default_factory=list)
    features: list[EnvironmentFeature] = Field(default_factory=list)
    links: list[LinkSpec] = Field(default_factory=list)
    operator_point: Identifier | None = None

    @cached_property
    def plc_index(self) -> dict[str, PlcSpec]:
        return {plc.id: plc for plc in self.plcs}

    @cached_property
    def sensor_index(self) -> dict[str, SensorSpec]:
        return {sensor.id: sensor for sensor in self.sensors}

    @cached_property
    def actuator_index(self) -> dict[str, ActuatorSpec]:
        return {act.id: act for act in self.actuators}

    @cached_property
    def feature_index(self) -> dict[str, EnvironmentFeature]:
        return {feature.id: feature for feature in self.features}

    @cached_property
    def link_index(self) -> dict[str, LinkSpec]:
        return {link.channel: link for link in self.links}

    @cached_property
    def sensor_by_variable(self) -> dict[tuple[str, str], SensorSpec]:
        return {(s.attaches_to.plc_id, s.attaches_to.name): s for s in self.sensors}

    @cached_property
    def actuator_by_variable(self) -> dict[tuple[str, str], ActuatorSpec]:
        return {(a.attaches_to.plc_id, a.attaches_to.name): a for a in self.actuators}

    def variable(self, plc_id: str, name: str) -> VariableSpec | None:
        plc = self.plc_index.get(plc_id)
        return plc.variable(name) if plc else None

    def catalog(self) -> SystemCatalog:
        sensors = {}
        for sensor in sorted(self.sensors, key=lambda s: s.id):
            var = self.variable(sensor.attaches_to.plc_id, sensor.attaches_to.name)
            sensors[sensor.id] = SensorInfo(
                plc=sensor.attaches_to.plc_id,
                variable=sensor.attaches_to.name,
                feature=sensor.measures,
                origin_point=sensor.origin_point,
                type=var.type if var else SignalType.FLOAT,
                values=var.values if var else None,
                normal_range=sensor.normal_range,
                unit=sensor.unit,
            )
        actuators = {}
        for act in sorted(self.actuators, key=lambda a: a.id):
            var = self.variable(act.attaches_to.plc_id, act.attaches_to.name)
            actuators[act.id] = ActuatorInfo(
                plc=act.attaches_to.plc_id,
                variable=act.attaches_to.name,
                affects=list(act.affects),
                type=var.type if var else SignalType.ENUM,
                values=var.values if var else None,
                command_set=list(act.command_set),
            )
        return SystemCatalog(
            ms_per_tick=self.ms_per_tick,
            sensors=sensors,
            actuators=actuators,
            features={f.id: f.kind for f in sorted(self.features, key=lambda f: f.id)},
            links={
                link.channel: LinkInfo(src=link.src, dst=link.dst, payload=link.payload)
                for link in sorted(self.links, key=lambda link: link.channel)
            },
            attachment_points=sorted(point.id for point in self.attachment_points),
            operator_point=self.operator_point,
        )


# ============================================================================
# Topology validation
# ============================================================================


def _duplicates(kind: str, ids: list[str]) -> list[ConfigError]:
    return [
        ConfigError(element=f"{kind}:{ident}", rule="unique-id", message=f"{kind} declared {n} times")
        for ident, n in sorted(Counter(ids).items())
        if n > 1
    ]


def _identifier_errors(t: Topology) -> list[ConfigError]:
    errors = []
    for sensor in t.sensors:
        if not sensor.unit.isascii():
            errors.append(
                ConfigError(element=f"sensor:{sensor.id}", rule="ascii", message="unit must be ASCII")
            )
    for plc in t.plcs:
        errors.extend(_duplicates(f"plc:{plc.id}/variable", [v.name for v in plc.variables]))
        for var in plc.variables:
            element = f"variable:{plc.id}.{var.name}"
            if var.type == SignalType.ENUM and not var.values:
                errors.append(ConfigError(element=element, rule="enum-set", message="enum without values"))
            if var.initial is not None and not value_matches(var.initial, var.type, var.values):
                errors.append(
                    ConfigError(element=element, rule="type", message="initial value has wrong type")
                )
    return errors


def _reference_errors(
    element: str, ref: VariableRef, t: Topology, expected: Direction
) -> tuple[list[ConfigError], VariableSpec | None]:
    if ref.plc_id not in t.plc_index:
        msg = f"references undeclared PLC '{ref.plc_id}'"
        return [ConfigError(element=element, rule="plc-ref", message=msg)], None
    var = t.variable(ref.plc_id, ref.name)
    if var is None:
        msg = f"references undeclared variable '{ref.key}'"
        return [ConfigError(element=element, rule="variable-ref", message=msg)], None
    if var.direction != expected:
        msg = f"variable '{ref.key}' must have direction {expected.value}"
        return [ConfigError(element=element, rule="direction", message=msg)], var
    return [], var


def _sensor_errors(t: Topology, points: set[str]) -> list[ConfigError]:
    errors = []
    for sensor in t.sensors:
        element = f"sensor:{sensor.id}"
        feature = t.feature_index.get(sensor.measures)
        if feature is None:
            msg = f"measures undeclared feature '{sensor.measures}'"
            errors.append(ConfigError(element=element, rule="feature-ref", message=msg))
        if sensor.origin_point not in points:
            msg = f"origin point '{sensor.origin_point}' is not declared"
            errors.append(ConfigError(element=element, rule="origin-ref", message=msg))
        if sensor.normal_range is not None and sensor.normal_range[0] > sensor.normal_range[1]:
            errors.append(ConfigError(element=element, rule="range", message="normal_range lo > hi"))
        ref_errors, var = _reference_errors(element, sensor.attaches_to, t, Direction.IN)
        errors.extend(ref_errors)
        if var is None or ref_errors:
            continue
        if not var.input_line:
            msg = f"input variable '{sensor.attaches_to.key}' has no input_line"
            errors.append(ConfigError(element=element, rule="input-line", message=msg))
        if feature is not None:
            continuous = feature.kind == FeatureKind.CONTINUOUS
            if continuous != (var.type in NUMERIC_TYPES):
                msg = f"variable type {var.type.value} cannot carry feature '{feature.id}'"
                errors.append(ConfigError(element=element, rule="type", message=msg))
        if sensor.normal_range is not None and var.type not in NUMERIC_TYPES:
            msg = "normal_range needs a numeric variable"
            errors.append(ConfigError(element=element, rule="range", message=msg))
    return errors


def _actuator_errors(t: Topology) -> list[ConfigError]:
    errors = []
    for act in t.actuators:
        element = f"actuator:{act.id}"
        if not act.affects:
            errors.append(ConfigError(element=element, rule="affects", message="affects is empty"))
        for fid in act.affects:
            if fid not in t.feature_index:
                msg = f"affects undeclared feature '{fid}'"
                errors.append(ConfigError(element=element, rule="feature-ref", message=msg))
        ref_errors, var = _reference_errors(element, act.attaches_to, t, Direction.OUT)
        errors.extend(ref_errors)
        for command in act.command_set:
            if var is not None and not value_matches(command, var.type, var.values):
                msg = f"command {command!r} does not match variable type"
                errors.append(ConfigError(element=element, rule="command-set", message=msg))
        for effect in act.effects:
            if effect.feature not in act.affects:
                msg = f"effect on '{effect.feature}' outside affects"
                errors.append(ConfigError(element=element, rule="effect", message=msg))
            if not any(values_equal(effect.command, c) for c in act.command_set):
                msg = f"effect command {effect.command!r} outside command_set"
                errors.append(ConfigError(element=element, rule="effect", message=msg))
            feature = t.feature_index.get(effect.feature)
            if feature is not None and not feature.accepts(effect.target):
                msg = f"effect target {effect.target!r} does not fit feature '{feature.id}'"
                errors.append(ConfigError(element=element, rule="type", message=msg))
    return errors


def _feature_errors(t: Topology) -> list[ConfigError]:
    errors = []
    for feature in t.features:
        if not feature.accepts(feature.initial_value):
            msg = f"initial value {feature.initial_value!r} does not fit a {feature.kind.value} feature"
            errors.append(ConfigError(element=f"feature:{feature.id}", rule="type", message=msg))
    return errors


def _link_and_plc_errors(t: Topology, points: set[str]) -> list[ConfigError]:
    errors = []
    for plc in t.plcs:
        if plc.location not in points:
            msg = f"location '{plc.location}' is not a declared attachment point"
            errors.append(ConfigError(element=f"plc:{plc.id}", rule="origin-ref", message=msg))
    for link in t.links:
        for end in (link.src, link.dst):
            if end not in t.plc_index:
                msg = f"endpoint '{end}' is not a declared PLC"
                errors.append(ConfigError(element=f"link:{link.channel}", rule="plc-ref", message=msg))
    if t.operator_point is not None and t.operator_point not in points:
        msg = f"operator point '{t.operator_point}' is not declared"
        errors.append(ConfigError(element="topology", rule="origin-ref", message=msg))
    return errors


def validate_topology(t: Topology) -> list[ConfigError]:
    """
    Walk every cross-reference of a topology.

    The result is sorted, so permuting declaration order yields the same list.

    Args:
        t: Topology to check

    Returns:
        Empty list iff the topology is valid
    """
    points = {point.id for point in t.attachment_points}
    errors: list[ConfigError] = []
    errors.extend(_duplicates("plc", [p.id for p in t.plcs]))
    errors.extend(_duplicates("sensor", [s.id for s in t.sensors]))
    errors.extend(_duplicates("actuator", [a.id for a in t.actuators]))
    errors.extend(_duplicates("feature", [f.id for f in t.features]))
    errors.extend(_duplicates("link", [link.channel for link in t.links]))
    errors.extend(_duplicates("attachment_point", [p.id for p in t.attachment_points]))
    errors.extend(_identifier_errors(t))
    errors.extend(_sensor_errors(t, points))
    errors.extend(_actuator_errors(t))
    errors.extend(_feature_errors(t))
    errors.extend(_link_and_plc_errors(t, points))
    bound = Counter((s.attaches_to.plc_id, s.attaches_to.name) for s in t.sensors)
    for (plc_id, name), n in sorted(bound.items()):
        if n > 1:
            msg = f"variable '{plc_id}.{name}' bound to {n} sensors"
            errors.append(ConfigError(element=f"variable:{plc_id}.{name}", rule="binding", message=msg))
    return sorted(errors, key=lambda e: (e.element, e.rule, e.message))
