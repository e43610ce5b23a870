"""
Plant Simulation Module

Discrete-time environment dynamics, sensor sampling, attack injection and the
tick loop that drives the PLC scans. Each tick runs the phases
sample, scan, operator, publish, and then steps the plant under the standing
actuator commands. Messages sent during tick t are delivered at t + 1.
"""

from itertools import count
from typing import Annotated, Any, Literal, Mapping, Optional, Sequence, Union

import numpy as np
from aws_lambda_powertools import Logger
from pydantic import Field

from exceptions import ConfigurationError, ValidationError  # type: ignore
from helper import SERVICE_NAME, stream_key  # type: ignore
from models import (  # type: ignore
    MAX_TICK,
    ConfigError,
    Direction,
    FeatureKind,
    Identifier,
    SignalType,
    SignalValue,
    StrictModel,
    Timestamp,
    Topology,
    timestamp_ms,
    validate_topology,
    value_matches,
    value_type,
)
from services.logic import (  # type: ignore
    InboxMessage,
    PlcProgram,
    WriteRecord,
    initial_memory,
    scan,
    typecheck_program,
)
from services.trace import Phase, RecordKind, TraceHeader, TraceLog, TraceRecord, VarTag  # type: ignore

logger = Logger(service=SERVICE_NAME, child=True)


# ============================================================================
# Plant model
# ============================================================================


class FeatureDynamics(StrictModel):
    """Response parameters of one feature. ``ambient`` defaults to its initial value."""

    alpha: float = Field(default=0.1, gt=0.0, le=1.0)
    ambient: Optional[SignalValue] = None
    decay_rate: float = Field(default=0.0, ge=0.0, le=1.0)


class PlantParams(StrictModel):
    features: dict[str, FeatureDynamics] = Field(default_factory=dict)

    def dynamics(self, feature_id: str) -> FeatureDynamics:
        return self.features.get(feature_id, FeatureDynamics())


class Disturbance(StrictModel):
    """External drive on a feature during ``[at_tick, until_tick)``."""

    feature: Identifier
    at_tick: int = Field(..., ge=0)
    until_tick: int = Field(..., ge=0)
    target: SignalValue

    def active(self, tick: int) -> bool:
        return self.at_tick <= tick < self.until_tick


class PlantState(StrictModel):
    tick: int = Field(default=0, ge=0)
    feature_values: dict[str, SignalValue] = Field(default_factory=dict)

    @classmethod
    def initial(cls, topology: Topology) -> "PlantState":
        values: dict[str, SignalValue] = {}
        for feature in topology.features:
            value = feature.initial_value
            values[feature.id] = float(value) if feature.kind == FeatureKind.CONTINUOUS else value
        return cls(tick=0, feature_values=values)


class BusEvent(StrictModel):
    """A reading or message as it appears on the control network."""

    tick: int
    kind: RecordKind
    plc: str
    name: str
    value: SignalValue
    origin: str
    seq: int = 0
    device: Optional[str] = None
    dst: Optional[str] = None


class OperatorAction(StrictModel):
    """HMI write of a PLC variable."""

    at_tick: int = Field(..., ge=0)
    plc: Identifier
    variable: Identifier
    value: SignalValue


# ============================================================================
# Attacks
# ============================================================================


class ForgeSensor(StrictModel):
    kind: Literal["forge_sensor"] = "forge_sensor"
    at_tick: int = Field(..., ge=0)
    plc: Identifier
    variable: Identifier
    value: SignalValue
    origin_point: Identifier
    duration_ticks: int = Field(default=1, ge=1)

    def active(self, tick: int) -> bool:
        return self.at_tick <= tick < self.at_tick + self.duration_ticks


class InjectMessage(StrictModel):
    kind: Literal["inject_message"] = "inject_message"
    at_tick: int = Field(..., ge=0)
    channel: Identifier
    payload: SignalValue
    origin_point: Identifier


class ReplayWindow(StrictModel):
    """Re-emit readings recorded during ``[from_tick, to_tick)`` starting at ``at_tick``."""

    kind: Literal["replay_window"] = "replay_window"
    at_tick: int = Field(..., ge=0)
    from_tick: int = Field(..., ge=0)
    to_tick: int = Field(..., ge=0)
    origin_point: Identifier
    sensor: Optional[Identifier] = None

    def source_tick(self, tick: int) -> Optional[int]:
        offset = tick - self.at_tick
        if 0 <= offset < self.to_tick - self.from_tick:
            return self.from_tick + offset
        return None


AttackStep = Annotated[
    Union[ForgeSensor, InjectMessage, ReplayWindow], Field(discriminator="kind")
]


class AttackScript(StrictModel):
    name: str = ""
    steps: list[AttackStep] = Field(default_factory=list)


def check_attack_script(script: AttackScript, topology: Topology, ticks: int) -> list[ConfigError]:
    """Script-load checks: horizon, origins, and the variables and channels each step names."""
    points = {point.id for point in topology.attachment_points}
    errors = []
    for index, step in enumerate(script.steps):
        element = f"attack:{script.name or 'script'}[{index}]"

        def fail(rule: str, message: str) -> None:
            errors.append(ConfigError(element=element, rule=rule, message=message))

        if step.at_tick >= ticks:
            fail("horizon", f"at_tick {step.at_tick} is outside the {ticks}-tick horizon")
        if step.origin_point not in points:
            fail("origin-ref", f"origin point '{step.origin_point}' is not declared")
        if isinstance(step, ForgeSensor):
            sensor = topology.sensor_by_variable.get((step.plc, step.variable))
            var = topology.variable(step.plc, step.variable)
            if sensor is None or var is None:
                fail("variable-ref", f"'{step.plc}.{step.variable}' is not a sensor input")
            elif not value_matches(step.value, var.type, var.values):
                fail("type", f"forged value {step.value!r} does not fit {var.type.value}")
        elif isinstance(step, InjectMessage):
            link = topology.link_index.get(step.channel)
            if link is None:
                fail("channel-ref", f"channel '{step.channel}' is not declared")
            elif not value_matches(step.payload, link.payload, link.values):
                fail("type", f"payload {step.payload!r} does not fit {link.payload.value}")
        else:
            if not step.from_tick < step.to_tick <= step.at_tick:
                fail("window", "replay needs from_tick < to_tick <= at_tick")
            if step.sensor is not None and step.sensor not in topology.sensor_index:
                fail("sensor-ref", f"sensor '{step.sensor}' is not declared")
    return errors


def _coerce(template: Any, value: Any) -> Any:
    if isinstance(template, float) and value_type(value) == SignalType.INT:
        return float(value)
    return value


def apply_attacks(
    events: Sequence[BusEvent],
    script: Optional[AttackScript],
    tick: int,
    *,
    topology: Topology,
    recorded: Optional[Mapping[int, Sequence[BusEvent]]] = None,
) -> list[BusEvent]:
    """
    Apply the attack steps active at ``tick``.

    Forged and replayed readings replace the legitimate reading in place
    (same seq) and carry the attacker's origin. Injected messages are
    appended after the readings.

    Args:
        events: Legitimate readings of this tick
        script: Attack script, or None
        tick: Current tick
        topology: System topology
        recorded: Readings already on the bus, by tick, used by replay

    Returns:
        The events the PLCs observe
    """
    result = list(events)
    if script is None:
        return result
    for step in script.steps:
        if isinstance(step, ForgeSensor) and step.active(tick):
            for index, event in enumerate(result):
                if event.kind == RecordKind.SENSOR_READING and (event.plc, event.name) == (
                    step.plc,
                    step.variable,
                ):
                    update = {"value": _coerce(event.value, step.value), "origin": step.origin_point}
                    result[index] = event.model_copy(update=update)
                    logger.debug("Forged reading", extra={"tick": tick, "device": event.device})
        elif isinstance(step, ReplayWindow):
            source = step.source_tick(tick)
            if source is None:
                continue
            history = {event.device: event for event in (recorded or {}).get(source, ())}
            for index, event in enumerate(result):
                if event.kind != RecordKind.SENSOR_READING or event.device not in history:
                    continue
                if step.sensor is not None and event.device != step.sensor:
                    continue
                update = {"value": history[event.device].value, "origin": step.origin_point}
                result[index] = event.model_copy(update=update)
        elif isinstance(step, InjectMessage) and step.at_tick == tick:
            link = topology.link_index[step.channel]
            result.append(
                BusEvent(
                    tick=tick,
                    kind=RecordKind.INTER_PLC_MESSAGE,
                    plc=link.src,
                    name=step.channel,
                    value=step.payload,
                    origin=step.origin_point,
                    seq=len(result),
                    dst=link.dst,
                )
            )
    return result


# ============================================================================
# Dynamics and sampling
# ============================================================================


def step_plant(
    state: PlantState,
    commands: Mapping[str, Any],
    params: PlantParams,
    topology: Topology,
    disturbances: Sequence[Disturbance] = (),
) -> PlantState:
    """
    Advance the environment by one tick.

    Continuous features follow ``x + alpha * (target - x)`` where the target
    is the mean of every active effect; discrete features take the last
    target in actuator id order, with disturbances applied last. Features
    nobody drives decay toward their ambient value.

    Args:
        state: Current state
        commands: Standing command per actuator id
        params: Per-feature dynamics
        topology: System topology
        disturbances: External drives

    Returns:
        State at ``state.tick + 1``

    Raises:
        ValidationError: If a command names an undeclared actuator
    """
    targets: dict[str, list[Any]] = {}
    for actuator_id in sorted(commands):
        actuator = topology.actuator_index.get(actuator_id)
        if actuator is None:
            raise ValidationError(
                "Command for undeclared actuator", details={"actuator": actuator_id}
            )
        for effect in actuator.targets_for(commands[actuator_id]):
            targets.setdefault(effect.feature, []).append(effect.target)
    for disturbance in disturbances:
        if disturbance.active(state.tick):
            targets.setdefault(disturbance.feature, []).append(disturbance.target)

    values: dict[str, SignalValue] = {}
    for feature in sorted(topology.features, key=lambda f: f.id):
        dyn = params.dynamics(feature.id)
        current = state.feature_values[feature.id]
        ambient = dyn.ambient if dyn.ambient is not None else feature.initial_value
        driven = targets.get(feature.id)
        if feature.kind == FeatureKind.CONTINUOUS:
            goal = float(np.mean(driven)) if driven else float(ambient)
            rate = dyn.alpha if driven else dyn.decay_rate
            values[feature.id] = current + rate * (goal - current)
        elif driven:
            values[feature.id] = driven[-1]
        else:
            values[feature.id] = ambient if dyn.decay_rate > 0 else current
    return PlantState(tick=state.tick + 1, feature_values=values)


def noise_generator(seed: int, sensor_id: str, tick: int) -> np.random.Generator:
    """Independent stream per (sensor, tick) so adding a sensor never perturbs another."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stream_key(sensor_id), tick))
    )


def sample_sensors(state: PlantState, topology: Topology, seed: int, tick: int) -> list[BusEvent]:
    """One reading per sensor, ordered by sensor id."""
    events = []
    for seq, sensor in enumerate(sorted(topology.sensors, key=lambda s: s.id)):
        ref = sensor.attaches_to
        var = topology.variable(ref.plc_id, ref.name)
        value = state.feature_values[sensor.measures]
        if var.type in (SignalType.INT, SignalType.FLOAT):
            value = float(value)
            if sensor.noise_sigma > 0:
                value += float(noise_generator(seed, sensor.id, tick).normal(0.0, sensor.noise_sigma))
            if var.type == SignalType.INT:
                value = int(round(value))
        events.append(
            BusEvent(
                tick=tick,
                kind=RecordKind.SENSOR_READING,
                plc=ref.plc_id,
                name=ref.name,
                value=value,
                origin=sensor.origin_point,
                seq=seq,
                device=sensor.id,
            )
        )
    return events


# ============================================================================
# Tick loop
# ============================================================================


def check_run_inputs(
    topology: Topology,
    disturbances: Sequence[Disturbance],
    operator_actions: Sequence[OperatorAction],
) -> list[ConfigError]:
    errors = []
    for index, dist in enumerate(disturbances):
        element = f"disturbance[{index}]"
        feature = topology.feature_index.get(dist.feature)
        if feature is None:
            msg = f"feature '{dist.feature}' is not declared"
            errors.append(ConfigError(element=element, rule="feature-ref", message=msg))
        elif not feature.accepts(dist.target):
            msg = f"target {dist.target!r} does not fit {feature.kind.value} feature '{feature.id}'"
            errors.append(ConfigError(element=element, rule="type", message=msg))
        if dist.until_tick <= dist.at_tick:
            errors.append(ConfigError(element=element, rule="window", message="empty window"))
    for index, action in enumerate(operator_actions):
        element = f"operator_action[{index}]"
        var = topology.variable(action.plc, action.variable)
        if var is None:
            msg = f"'{action.plc}.{action.variable}' is not declared"
            errors.append(ConfigError(element=element, rule="variable-ref", message=msg))
        elif var.direction == Direction.IN:
            errors.append(ConfigError(element=element, rule="direction", message="cannot write an input"))
        elif not value_matches(action.value, var.type, var.values):
            msg = f"value {action.value!r} does not fit {var.type.value}"
            errors.append(ConfigError(element=element, rule="type", message=msg))
    if topology.operator_point is None and operator_actions:
        msg = "operator actions need an operator_point"
        errors.append(ConfigError(element="topology", rule="origin-ref", message=msg))
    return errors


def _validate_run(
    topology: Topology,
    programs: Sequence[PlcProgram],
    attack: Optional[AttackScript],
    ticks: int,
    disturbances: Sequence[Disturbance],
    operator_actions: Sequence[OperatorAction],
) -> dict[str, PlcProgram]:
    errors = validate_topology(topology)
    if errors:
        raise ConfigurationError("Topology failed validation", errors)
    issues: list[Any] = []
    by_plc: dict[str, PlcProgram] = {}
    for program in programs:
        if program.plc_id in by_plc:
            issues.append(f"program:{program.plc_id} declared twice")
        by_plc[program.plc_id] = program
        issues.extend(typecheck_program(program, topology))
    if attack is not None:
        issues.extend(check_attack_script(attack, topology, ticks))
    issues.extend(check_run_inputs(topology, disturbances, operator_actions))
    if issues:
        raise ConfigurationError("Scenario inputs failed validation", issues)
    return by_plc


def run_simulation(
    topology: Topology,
    programs: Sequence[PlcProgram],
    *,
    ticks: int = 200,
    seed: int = 0,
    attack: Optional[AttackScript] = None,
    plant: Optional[PlantParams] = None,
    disturbances: Sequence[Disturbance] = (),
    operator_actions: Sequence[OperatorAction] = (),
    scenario_name: str = "",
    scenario_hash: str = "",
) -> TraceLog:
    """
    Run the closed loop for ``ticks`` ticks and collect the trace.

    Scan faults are recorded and the run continues.

    Raises:
        ValidationError: If ticks or seed are out of range
        ConfigurationError: If the topology, programs, attack or run inputs are invalid
    """
    if not 0 <= ticks < MAX_TICK:
        raise ValidationError("ticks out of range", details={"ticks": ticks})
    if seed < 0:
        raise ValidationError("seed must be non-negative", details={"seed": seed})
    by_plc = _validate_run(topology, programs, attack, ticks, disturbances, operator_actions)
    params = plant or PlantParams()
    plcs = sorted(topology.plcs, key=lambda p: p.id)
    memory = {plc.id: initial_memory(plc) for plc in plcs}
    state = PlantState.initial(topology)
    inbox: dict[str, list[InboxMessage]] = {}
    standing: dict[str, Any] = {}
    recorded: dict[int, list[BusEvent]] = {}
    records: list[TraceRecord] = []

    logger.info(
        "Simulation started",
        extra={"scenario": scenario_name, "ticks": ticks, "seed": seed, "plcs": len(plcs)},
    )
    for tick in range(ticks):
        ms = timestamp_ms(Timestamp(tick=tick, ms_per_tick=topology.ms_per_tick))
        seq = count()

        def emit(phase: Phase, kind: RecordKind, **fields: Any) -> None:
            records.append(
                TraceRecord(tick=tick, ms=ms, phase=phase, kind=kind, seq=next(seq), **fields)
            )

        def var_tag(plc_id: str, name: str) -> VarTag:
            var = topology.variable(plc_id, name)
            return VarTag(name=name, dir=var.direction, line=var.input_line)

        events = sample_sensors(state, topology, seed, tick)
        events = apply_attacks(events, attack, tick, topology=topology, recorded=recorded)
        readings = [e for e in events if e.kind == RecordKind.SENSOR_READING]
        injected = [e for e in events if e.kind == RecordKind.INTER_PLC_MESSAGE]
        recorded[tick] = readings
        for reading in readings:
            emit(
                Phase.SAMPLE,
                RecordKind.SENSOR_READING,
                plc=reading.plc,
                var=var_tag(reading.plc, reading.name),
                value=reading.value,
                origin=reading.origin,
                device=reading.device,
            )

        outgoing: dict[str, list[InboxMessage]] = {}
        for plc in plcs:
            inputs = {v.name: v.default() for v in plc.variables if v.direction == Direction.IN}
            inputs.update({r.name: r.value for r in readings if r.plc == plc.id})
            program = by_plc.get(plc.id, PlcProgram(plc_id=plc.id))
            result = scan(program, inputs, inbox.get(plc.id, []), tick, memory[plc.id])
            emit(Phase.SCAN, RecordKind.SCAN_BEGIN, plc=plc.id, origin=plc.location)
            effects = [(w.rule_index, w.action_index, w) for w in result.outputs_written]
            effects += [(m.rule_index, m.action_index, m) for m in result.messages_sent]
            for _, _, item in sorted(effects, key=lambda e: (e[0], e[1])):
                if isinstance(item, WriteRecord):
                    actuator = topology.actuator_by_variable.get((plc.id, item.variable))
                    if actuator is not None:
                        standing[actuator.id] = item.value
                    emit(
                        Phase.SCAN,
                        RecordKind.ACTUATOR_COMMAND if actuator else RecordKind.VARIABLE_WRITE,
                        plc=plc.id,
                        var=var_tag(plc.id, item.variable),
                        value=item.value,
                        origin=plc.location,
                        device=actuator.id if actuator else None,
                        rule=item.rule_index,
                        reads=item.reads,
                    )
                else:
                    link = topology.link_index[item.channel]
                    outgoing.setdefault(link.dst, []).append(
                        InboxMessage(channel=item.channel, payload=item.payload, src=plc.id)
                    )
                    emit(
                        Phase.SCAN,
                        RecordKind.INTER_PLC_MESSAGE,
                        plc=plc.id,
                        channel=item.channel,
                        value=item.payload,
                        origin=plc.location,
                        dst=link.dst,
                        rule=item.rule_index,
                        reads=item.reads,
                    )
            if result.fault is not None:
                emit(
                    Phase.SCAN,
                    RecordKind.SCAN_FAULT,
                    plc=plc.id,
                    rule=result.fault.rule_index,
                    message=result.fault.message,
                )
            emit(Phase.SCAN, RecordKind.SCAN_END, plc=plc.id, origin=plc.location)
            memory[plc.id] = result.memory

        for action in operator_actions:
            if action.at_tick != tick:
                continue
            actuator = topology.actuator_by_variable.get((action.plc, action.variable))
            if actuator is not None:
                standing[actuator.id] = action.value
            memory[action.plc] = {**memory[action.plc], action.variable: action.value}
            emit(
                Phase.OPERATOR,
                RecordKind.ACTUATOR_COMMAND if actuator else RecordKind.VARIABLE_WRITE,
                plc=action.plc,
                var=var_tag(action.plc, action.variable),
                value=action.value,
                origin=topology.operator_point,
                device=actuator.id if actuator else None,
                by="operator",
            )

        for message in injected:
            outgoing.setdefault(message.dst, []).append(
                InboxMessage(channel=message.name, payload=message.value, src=message.plc)
            )
            emit(
                Phase.PUBLISH,
                RecordKind.INTER_PLC_MESSAGE,
                plc=message.plc,
                channel=message.name,
                value=message.value,
                origin=message.origin,
                dst=message.dst,
            )

        inbox = outgoing
        state = step_plant(state, standing, params, topology, disturbances)

    header = TraceHeader(
        seed=seed,
        scenario=scenario_name,
        scenario_hash=scenario_hash,
        ticks=ticks,
        catalog=topology.catalog(),
    )
    logger.info("Simulation finished", extra={"scenario": scenario_name, "records": len(records)})
    return TraceLog(header=header, records=records)
