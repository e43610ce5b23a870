"""Brute-force reference answers computed by scanning trace records directly.

None of these touch the provenance graph, so agreement with the graph
queries is meaningful.
"""

from bisect import bisect_left
from typing import Any, Callable, Optional

from models import compare_signal, values_equal  # type: ignore
from services.provenance import node_id  # type: ignore
from services.trace import RecordKind, TraceLog, TraceRecord  # type: ignore

Span = tuple[int, int]


def command_records(trace: TraceLog, actuator: str, t0: int = 0, t1: Optional[int] = None) -> list:
    end = trace.header.ticks if t1 is None else t1
    return [
        r
        for r in trace.of_kind(RecordKind.ACTUATOR_COMMAND)
        if r.device == actuator and t0 <= r.tick < end
    ]


def reading_records(trace: TraceLog, sensor: str) -> list[TraceRecord]:
    return [r for r in trace.of_kind(RecordKind.SENSOR_READING) if r.device == sensor]


def command_node_id(record: TraceRecord) -> str:
    return node_id("cmd", record.plc, record.var.name, record.tick, record.seq)


def reading_node_id(record: TraceRecord) -> str:
    return node_id("rd", record.device, record.tick)


def _holds(op: Any, value: Any, operand: Any) -> bool:
    try:
        return compare_signal(op, value, operand)
    except TypeError:
        return False


def _predicate_holds(predicate: Any, value: Any) -> bool:
    operand = predicate.values if predicate.op.value == "in" else predicate.value
    return _holds(predicate.op, value, operand)


# ============================================================================
# Command windows
# ============================================================================


def _windows(
    trace: TraceLog, actuator: str, within: int, keep: Callable[[list[TraceRecord]], bool]
) -> list[tuple[int, list[TraceRecord]]]:
    commands = command_records(trace, actuator)
    found: list[tuple[int, list[TraceRecord]]] = []
    for anchor in sorted({r.tick for r in commands}):
        members = [r for r in commands if anchor <= r.tick < anchor + within]
        if len(members) < 2 or not keep(members):
            continue
        keys = {r.order_key for r in members}
        if any(keys <= {r.order_key for r in earlier} for _, earlier in found):
            continue
        found.append((anchor, members))
    return found


def duplicate_groups(trace: TraceLog, actuator: str, within: int) -> list[tuple[int, list[TraceRecord]]]:
    """(anchor, commands) for every ``[anchor, anchor + within)`` window not inside an earlier one."""
    return _windows(trace, actuator, within, lambda members: True)


def conflict_groups(trace: TraceLog, actuator: str, within: int) -> list[tuple[int, list[TraceRecord]]]:
    return _windows(
        trace,
        actuator,
        within,
        lambda members: any(not values_equal(members[0].value, r.value) for r in members),
    )


# ============================================================================
# Readings
# ============================================================================


def excursion_runs(trace: TraceLog, sensor: str, min_duration: int) -> list[Span]:
    """(start, end) tick spans of consecutive out-of-range readings."""
    return [span for span, _ in _excursions(trace, sensor, min_duration)]


def _excursions(trace: TraceLog, sensor: str, min_duration: int) -> list[tuple[Span, list[TraceRecord]]]:
    low, high = trace.catalog.sensors[sensor].normal_range
    runs: list[list[TraceRecord]] = []
    for r in reading_records(trace, sensor):
        if low <= r.value <= high:
            continue
        if runs and runs[-1][-1].tick + 1 == r.tick:
            runs[-1].append(r)
        else:
            runs.append([r])
    return [((run[0].tick, run[-1].tick + 1), run) for run in runs if len(run) >= min_duration]


def foreign_origin_readings(trace: TraceLog, sensor: str, expected: str) -> list[int]:
    return [r.tick for r in reading_records(trace, sensor) if r.origin != expected]


def contention_ticks(trace: TraceLog, feature: str, max_concurrent: int) -> list[int]:
    return sorted(_contention(trace, feature, max_concurrent))


def _contention(trace: TraceLog, feature: str, max_concurrent: int) -> dict[int, list[str]]:
    affecting = {a for a, info in trace.catalog.actuators.items() if feature in info.affects}
    per_tick: dict[int, set[str]] = {}
    for r in trace.of_kind(RecordKind.ACTUATOR_COMMAND):
        if r.device in affecting:
            per_tick.setdefault(r.tick, set()).add(r.device)
    return {t: sorted(devices) for t, devices in per_tick.items() if len(devices) > max_concurrent}


def uncorroborated_readings(trace: TraceLog, policy: Any) -> list[TraceRecord]:
    """Trigger readings with no supporting corroborating reading within the window."""
    support_readings = reading_records(trace, policy.corroborating_sensor)
    predicate = policy.corroborating_predicate
    if hasattr(predicate, "rise"):
        over = predicate.over_ticks or policy.window_ticks
        by_tick = {r.tick: r.value for r in support_readings}
        support = {
            t for t, v in by_tick.items() if t - over in by_tick and v - by_tick[t - over] >= predicate.rise
        }
    else:
        support = {r.tick for r in support_readings if _predicate_holds(predicate, r.value)}
    return [
        r
        for r in reading_records(trace, policy.trigger_sensor)
        if _predicate_holds(policy.trigger_predicate, r.value)
        and not any(abs(t - r.tick) <= policy.window_ticks for t in support)
    ]


# ============================================================================
# Lineage
# ============================================================================


class NaiveLineage:
    """Resolves read-set tokens against plain per-key indexes of the raw records."""

    def __init__(self, trace: TraceLog) -> None:
        self.readings: dict[tuple, TraceRecord] = {}
        self.writes: dict[tuple, list[TraceRecord]] = {}
        self.messages: dict[tuple, TraceRecord] = {}
        for r in trace.records:
            if r.kind == RecordKind.SENSOR_READING:
                self.readings[(r.tick, r.plc, r.var.name)] = r
            elif r.kind in (RecordKind.VARIABLE_WRITE, RecordKind.ACTUATOR_COMMAND):
                self.writes.setdefault((r.plc, r.var.name), []).append(r)
            elif r.kind == RecordKind.INTER_PLC_MESSAGE:
                self.messages[(r.tick, r.dst, r.channel)] = r
        self.write_ticks = {key: [w.tick for w in found] for key, found in self.writes.items()}

    def cause(self, token: str, effect: TraceRecord) -> Optional[TraceRecord]:
        space, _, name = token.partition(":")
        if space == "in":
            return self.readings.get((effect.tick, effect.plc, name))
        if space == "mem":
            ticks = self.write_ticks.get((effect.plc, name), [])
            index = bisect_left(ticks, effect.tick)
            return self.writes[(effect.plc, name)][index - 1] if index else None
        return self.messages.get((effect.tick - 1, effect.plc, name))

    def closure(self, record: TraceRecord) -> list[TraceRecord]:
        """Every record ``record`` transitively derives from, through read sets."""
        found: dict[tuple, TraceRecord] = {}
        stack = [record]
        while stack:
            current = stack.pop()
            for token in current.reads or []:
                cause = self.cause(token, current)
                if cause is None or cause.order_key in found:
                    continue
                found[cause.order_key] = cause
                stack.append(cause)
        return list(found.values())

    def sensors(self, record: TraceRecord) -> set[str]:
        """Sensor devices whose readings ``record`` transitively derives from."""
        return {r.device for r in self.closure(record) if r.kind == RecordKind.SENSOR_READING}


def _permitted(policy: Any, record: TraceRecord, lineage: NaiveLineage) -> bool:
    context = [record, *lineage.closure(record)]
    for cond in policy.permit.any_of:
        if getattr(cond, "operator", False):
            if any(r.by == "operator" for r in context):
                return True
            continue
        for r in context:
            if (
                r.kind == RecordKind.SENSOR_READING
                and r.device == cond.sensor
                and (cond.origin is None or r.origin == cond.origin)
                and _predicate_holds(cond, r.value)
            ):
                return True
    return False


def guard_violations(trace: TraceLog, policy: Any, lineage: NaiveLineage) -> list[TraceRecord]:
    return [
        r
        for r in command_records(trace, policy.actuator)
        if values_equal(r.value, policy.command_value) and not _permitted(policy, r, lineage)
    ]


# ============================================================================
# Reference matches
# ============================================================================


def reference_matches(trace: TraceLog, policy: Any, lineage: NaiveLineage) -> list[tuple[Span, list[str]]]:
    """Sorted (tick span, sorted witness ids) pairs a policy should report on ``trace``."""
    kind = policy.kind
    found: list[tuple[Span, list[str]]] = []
    if kind in ("duplicate_actuation", "conflicting_commands"):
        groups = (duplicate_groups if kind == "duplicate_actuation" else conflict_groups)(
            trace, policy.actuator, policy.within_ticks
        )
        found = [
            ((anchor, anchor + policy.within_ticks), [command_node_id(r) for r in group])
            for anchor, group in groups
        ]
    elif kind == "range_excursion":
        found = [
            (span, [reading_node_id(r) for r in run])
            for span, run in _excursions(trace, policy.sensor, policy.min_duration_ticks)
        ]
    elif kind == "feature_contention":
        found = [
            ((t, t + 1), [node_id("act", a, t) for a in actuators])
            for t, actuators in _contention(trace, policy.feature, policy.max_concurrent).items()
        ]
    elif kind == "guard":
        found = [
            ((r.tick, r.tick + 1), [command_node_id(r)]) for r in guard_violations(trace, policy, lineage)
        ]
    elif kind == "correlation":
        w = policy.window_ticks
        found = [
            ((r.tick - w, r.tick + w + 1), [reading_node_id(r)])
            for r in uncorroborated_readings(trace, policy)
        ]
    elif kind == "source_binding":
        found = [
            ((r.tick, r.tick + 1), [reading_node_id(r)])
            for r in reading_records(trace, policy.sensor)
            if r.origin != policy.expected_origin_point
        ]
    return sorted((span, sorted(witness)) for span, witness in found)
