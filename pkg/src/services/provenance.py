"""
Provenance Graph Module

Builds a PROV-style causal graph from a trace and answers ancestry queries.

Edges point from effect to cause (a Command ``wasGeneratedBy`` its Scan, the
Scan ``used`` a Reading), so the ancestors of a node are the nodes reachable
from it. The micro level keeps every record; the macro level contracts
readings into per-feature regime intervals (one per origin, shared by sibling
sensors of the feature) and the commands of one actuator in one tick into a
single action.
"""

from enum import Enum
from typing import Any, Iterable, Optional, Union

import networkx as nx
from aws_lambda_powertools import Logger
from pydantic import Field
from pydantic import ValidationError as PydanticValidationError

from exceptions import NotFoundError, TraceFormatError, ValidationError  # type: ignore
from helper import SERVICE_NAME, canonical_json, content_hash, value_repr  # type: ignore
from models import SignalType, SignalValue, StrictModel, SystemCatalog  # type: ignore
from services.trace import PHASE_ORDER, Phase, RecordKind, TraceLog, TraceRecord  # type: ignore

logger = Logger(service=SERVICE_NAME, child=True)

PROVJSON_FORMAT = "plcprov-provjson"
PROVJSON_VERSION = 1
OPERATOR_AGENT = "operator"
AFTER_PUBLISH = len(PHASE_ORDER)


class Level(str, Enum):
    MICRO = "micro"
    MACRO = "macro"


class NodeKind(str, Enum):
    ENTITY = "entity"
    ACTIVITY = "activity"
    AGENT = "agent"


class NodeType(str, Enum):
    READING = "Reading"
    VARIABLE_STATE = "VariableState"
    COMMAND = "Command"
    MESSAGE = "Message"
    FEATURE_INTERVAL = "FeatureInterval"
    ACTUATOR_ACTION = "ActuatorAction"
    SCAN = "Scan"
    ACTUATION = "Actuation"
    PLC = "Plc"
    SENSOR_DEVICE = "SensorDevice"
    OPERATOR = "Operator"
    ORIGIN_POINT = "OriginPoint"

    @property
    def kind(self) -> NodeKind:
        if self in (NodeType.SCAN, NodeType.ACTUATION):
            return NodeKind.ACTIVITY
        if self in (NodeType.PLC, NodeType.SENSOR_DEVICE, NodeType.OPERATOR, NodeType.ORIGIN_POINT):
            return NodeKind.AGENT
        return NodeKind.ENTITY


class Relation(str, Enum):
    USED = "used"
    WAS_GENERATED_BY = "wasGeneratedBy"
    WAS_ASSOCIATED_WITH = "wasAssociatedWith"
    WAS_ATTRIBUTED_TO = "wasAttributedTo"
    WAS_DERIVED_FROM = "wasDerivedFrom"
    WAS_INFORMED_BY = "wasInformedBy"


EDGE_TYPING = {
    Relation.USED: (NodeKind.ACTIVITY, NodeKind.ENTITY),
    Relation.WAS_GENERATED_BY: (NodeKind.ENTITY, NodeKind.ACTIVITY),
    Relation.WAS_ASSOCIATED_WITH: (NodeKind.ACTIVITY, NodeKind.AGENT),
    Relation.WAS_ATTRIBUTED_TO: (NodeKind.ENTITY, NodeKind.AGENT),
    Relation.WAS_DERIVED_FROM: (NodeKind.ENTITY, NodeKind.ENTITY),
    Relation.WAS_INFORMED_BY: (NodeKind.ACTIVITY, NodeKind.ACTIVITY),
}

COMMAND_TYPES = frozenset({NodeType.COMMAND, NodeType.ACTUATOR_ACTION})
READING_TYPES = frozenset({NodeType.READING, NodeType.FEATURE_INTERVAL})
DOT_SHAPES = {NodeKind.ENTITY: "ellipse", NodeKind.ACTIVITY: "box", NodeKind.AGENT: "house"}


class ProvNode(StrictModel):
    """A graph node. ``name`` is the variable or channel, ``device`` the sensor or actuator."""

    id: str
    type: NodeType
    label: str = ""
    tick: Optional[int] = None
    end_tick: Optional[int] = None
    phase: Optional[Phase] = None
    seq: Optional[int] = None
    plc: Optional[str] = None
    name: Optional[str] = None
    device: Optional[str] = None
    devices: Optional[list[str]] = None
    feature: Optional[str] = None
    value: Optional[SignalValue] = None
    origin: Optional[str] = None
    dst: Optional[str] = None
    rule: Optional[int] = None
    by: Optional[str] = None
    fault: Optional[str] = None
    members: Optional[list[str]] = None

    @property
    def kind(self) -> NodeKind:
        return self.type.kind

    @property
    def order_key(self) -> tuple[int, int, int]:
        if self.kind == NodeKind.AGENT:
            return (-1, 0, 0)
        rank = PHASE_ORDER[self.phase] if self.phase is not None else AFTER_PUBLISH
        return (self.tick or 0, rank, self.seq or 0)


class ProvEdge(StrictModel):
    src: str
    dst: str
    relation: Relation


def node_id(prefix: str, *parts: Any) -> str:
    return f"{prefix}-{content_hash(prefix, *parts)}"


def _sort_key(node: ProvNode) -> tuple:
    return (node.order_key, node.id)


# ============================================================================
# Graph container
# ============================================================================


class ProvGraph:
    """Provenance DAG over a networkx MultiDiGraph keyed by relation.

    Usage:
        g = build_graph(trace, Level.MICRO)
        for cmd in commands_at(g, "door_lock", 0, 200):
            print(cmd.id, influencing_sensors(g, cmd.id))
    """

    def __init__(
        self,
        level: Level = Level.MICRO,
        catalog: Optional[SystemCatalog] = None,
        meta: Optional[dict[str, Any]] = None,
    ) -> None:
        self.level = Level(level)
        self.catalog = catalog or SystemCatalog()
        self.meta = dict(meta or {})
        self.graph = nx.MultiDiGraph()

    def __len__(self) -> int:
        return self.graph.number_of_nodes()

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.graph

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProvGraph):
            return NotImplemented
        return (
            self.level == other.level
            and self.nodes() == other.nodes()
            and self.edges() == other.edges()
        )

    def add_node(self, node: ProvNode) -> str:
        self.graph.add_node(node.id, data=node)
        return node.id

    def replace_node(self, node: ProvNode) -> None:
        self.graph.nodes[node.id]["data"] = node

    def add_edge(self, src: str, dst: str, relation: Relation) -> None:
        if not self.graph.has_edge(src, dst, key=relation):
            self.graph.add_edge(src, dst, key=relation)

    def node(self, node_id: str) -> ProvNode:
        if node_id not in self.graph:
            raise NotFoundError("Node not found", resource_type="ProvNode", resource_id=node_id)
        return self.graph.nodes[node_id]["data"]

    def nodes(self, *types: NodeType) -> list[ProvNode]:
        """Nodes in (tick, phase, seq) order, agents first; optionally filtered by type."""
        found = (data for _, data in self.graph.nodes(data="data"))
        if types:
            found = (node for node in found if node.type in types)
        return sorted(found, key=_sort_key)

    def edges(self) -> list[ProvEdge]:
        return sorted(
            (ProvEdge(src=u, dst=v, relation=k) for u, v, k in self.graph.edges(keys=True)),
            key=lambda e: (e.src, e.dst, e.relation.value),
        )

    def targets(self, node_id: str, relation: Relation) -> list[str]:
        return sorted(v for _, v, k in self.graph.out_edges(node_id, keys=True) if k == relation)

    def sources(self, node_id: str, relation: Relation) -> list[str]:
        return sorted(u for u, _, k in self.graph.in_edges(node_id, keys=True) if k == relation)

    def is_operator_attributed(self, node_id: str) -> bool:
        return OPERATOR_AGENT in self.targets(node_id, Relation.WAS_ATTRIBUTED_TO)

    def canonicalize(self) -> "ProvGraph":
        """Rebuild the backing graph in sorted node and edge order so traversals are stable."""
        fresh = nx.MultiDiGraph()
        for node in self.nodes():
            fresh.add_node(node.id, data=node)
        for edge in self.edges():
            fresh.add_edge(edge.src, edge.dst, key=edge.relation)
        self.graph = fresh
        return self

    def subgraph(self, node_ids: Iterable[str]) -> "ProvGraph":
        sub = ProvGraph(self.level, self.catalog, self.meta)
        sub.graph = self.graph.subgraph(node_ids).copy()
        return sub.canonicalize()


# ============================================================================
# Micro build
# ============================================================================


class _MicroBuilder:
    """Single pass over the trace records in (tick, phase, seq) order."""

    def __init__(self, g: ProvGraph) -> None:
        self.g = g
        self.tick: Optional[int] = None
        self.readings: dict[tuple[str, str], str] = {}
        self.readings_by_plc: dict[str, list[str]] = {}
        self.latest: dict[tuple[str, str], str] = {}
        self.delivered: dict[str, list[tuple[str, str, Optional[str]]]] = {}
        self.next_delivery: dict[str, list[tuple[str, str, Optional[str]]]] = {}
        self.scan_id: Optional[str] = None
        self.scan_plc: Optional[str] = None
        self.snapshot: dict[str, str] = {}
        self.pending: dict[str, str] = {}
        self.commands: dict[str, list[str]] = {}

    def agent(self, node_type: NodeType, ident: str) -> str:
        prefixes = {
            NodeType.PLC: "plc",
            NodeType.SENSOR_DEVICE: "sensor",
            NodeType.ORIGIN_POINT: "origin",
        }
        if node_type == NodeType.OPERATOR:
            agent_id = OPERATOR_AGENT
        else:
            agent_id = f"{prefixes[node_type]}:{ident}"
        if agent_id not in self.g:
            self.g.add_node(ProvNode(id=agent_id, type=node_type, label=ident))
        return agent_id

    def start_tick(self, tick: int) -> None:
        self.finish_tick()
        self.tick = tick
        self.readings = {}
        self.readings_by_plc = {}
        self.delivered = self.next_delivery
        self.next_delivery = {}
        self.commands = {}

    def finish_tick(self) -> None:
        for actuator, command_ids in sorted(self.commands.items()):
            info = self.g.catalog.actuators.get(actuator)
            actuation = self.g.add_node(
                ProvNode(
                    id=node_id("act", actuator, self.tick),
                    type=NodeType.ACTUATION,
                    label=f"actuate {actuator} @{self.tick}",
                    tick=self.tick,
                    device=actuator,
                    plc=info.plc if info else None,
                )
            )
            for command in command_ids:
                self.g.add_edge(actuation, command, Relation.USED)
            if info is not None:
                self.g.add_edge(actuation, self.agent(NodeType.PLC, info.plc), Relation.WAS_ASSOCIATED_WITH)

    def resolve(self, token: str, plc: str) -> Optional[str]:
        space, _, name = token.partition(":")
        if space == "in":
            return self.readings.get((plc, name))
        if space == "mem":
            return self.snapshot.get(name)
        if space == "msg":
            matching = [msg for channel, msg, _ in self.delivered.get(plc, []) if channel == name]
            return matching[-1] if matching else None
        return None

    def feed(self, record: TraceRecord) -> None:
        if record.tick != self.tick:
            self.start_tick(record.tick)
        handler = {
            RecordKind.SENSOR_READING: self.on_reading,
            RecordKind.SCAN_BEGIN: self.on_scan_begin,
            RecordKind.VARIABLE_WRITE: self.on_write,
            RecordKind.ACTUATOR_COMMAND: self.on_write,
            RecordKind.INTER_PLC_MESSAGE: self.on_message,
            RecordKind.SCAN_FAULT: self.on_fault,
            RecordKind.SCAN_END: self.on_scan_end,
        }[record.kind]
        handler(record)

    def on_reading(self, r: TraceRecord) -> None:
        info = self.g.catalog.sensors.get(r.device)
        reading = self.g.add_node(
            ProvNode(
                id=node_id("rd", r.device, r.tick),
                type=NodeType.READING,
                label=f"{r.device}={value_repr(r.value)} @{r.tick}",
                tick=r.tick,
                phase=r.phase,
                seq=r.seq,
                plc=r.plc,
                name=r.var.name,
                device=r.device,
                feature=info.feature if info else None,
                value=r.value,
                origin=r.origin,
            )
        )
        self.g.add_edge(reading, self.agent(NodeType.SENSOR_DEVICE, r.device), Relation.WAS_ATTRIBUTED_TO)
        self.g.add_edge(reading, self.agent(NodeType.ORIGIN_POINT, r.origin), Relation.WAS_ATTRIBUTED_TO)
        self.readings[(r.plc, r.var.name)] = reading
        self.readings_by_plc.setdefault(r.plc, []).append(reading)

    def on_scan_begin(self, r: TraceRecord) -> None:
        scan = self.g.add_node(
            ProvNode(
                id=node_id("scan", r.plc, r.tick),
                type=NodeType.SCAN,
                label=f"scan {r.plc} @{r.tick}",
                tick=r.tick,
                phase=r.phase,
                seq=r.seq,
                plc=r.plc,
                origin=r.origin,
            )
        )
        self.g.add_edge(scan, self.agent(NodeType.PLC, r.plc), Relation.WAS_ASSOCIATED_WITH)
        self.snapshot = {var: ident for (plc, var), ident in self.latest.items() if plc == r.plc}
        for used in self.readings_by_plc.get(r.plc, []):
            self.g.add_edge(scan, used, Relation.USED)
        for _, state in sorted(self.snapshot.items()):
            self.g.add_edge(scan, state, Relation.USED)
        for _, message, sender in self.delivered.get(r.plc, []):
            self.g.add_edge(scan, message, Relation.USED)
            if sender is not None:
                self.g.add_edge(scan, sender, Relation.WAS_INFORMED_BY)
        self.scan_id, self.scan_plc, self.pending = scan, r.plc, {}

    def on_write(self, r: TraceRecord) -> None:
        is_command = r.kind == RecordKind.ACTUATOR_COMMAND
        node_type = NodeType.COMMAND if is_command else NodeType.VARIABLE_STATE
        target = r.device if is_command else f"{r.plc}.{r.var.name}"
        entity = self.g.add_node(
            ProvNode(
                id=node_id("cmd" if is_command else "vs", r.plc, r.var.name, r.tick, r.seq),
                type=node_type,
                label=f"{target}:={value_repr(r.value)} @{r.tick}",
                tick=r.tick,
                phase=r.phase,
                seq=r.seq,
                plc=r.plc,
                name=r.var.name,
                device=r.device,
                value=r.value,
                origin=r.origin,
                rule=r.rule,
                by=r.by,
            )
        )
        if is_command:
            self.commands.setdefault(r.device, []).append(entity)
        if r.by == "operator":
            operator = self.agent(NodeType.OPERATOR, OPERATOR_AGENT)
            self.g.add_edge(entity, operator, Relation.WAS_ATTRIBUTED_TO)
            if r.origin:
                origin = self.agent(NodeType.ORIGIN_POINT, r.origin)
                self.g.add_edge(entity, origin, Relation.WAS_ATTRIBUTED_TO)
            self.latest[(r.plc, r.var.name)] = entity
            return
        self.require_scan(r)
        self.g.add_edge(entity, self.scan_id, Relation.WAS_GENERATED_BY)
        self.derive(entity, r)
        self.pending[r.var.name] = entity

    def on_message(self, r: TraceRecord) -> None:
        message = self.g.add_node(
            ProvNode(
                id=node_id("msg", r.channel, r.tick, r.seq),
                type=NodeType.MESSAGE,
                label=f"{r.channel}={value_repr(r.value)} @{r.tick}",
                tick=r.tick,
                phase=r.phase,
                seq=r.seq,
                plc=r.plc,
                name=r.channel,
                value=r.value,
                origin=r.origin,
                dst=r.dst,
                rule=r.rule,
            )
        )
        self.g.add_edge(message, self.agent(NodeType.ORIGIN_POINT, r.origin), Relation.WAS_ATTRIBUTED_TO)
        sender = None
        if r.phase == Phase.SCAN:
            self.require_scan(r)
            self.g.add_edge(message, self.scan_id, Relation.WAS_GENERATED_BY)
            self.derive(message, r)
            sender = self.scan_id
        self.next_delivery.setdefault(r.dst, []).append((r.channel, message, sender))

    def on_fault(self, r: TraceRecord) -> None:
        self.require_scan(r)
        self.g.replace_node(self.g.node(self.scan_id).model_copy(update={"fault": r.message}))

    def on_scan_end(self, r: TraceRecord) -> None:
        self.require_scan(r)
        for var, entity in self.pending.items():
            self.latest[(self.scan_plc, var)] = entity
        self.scan_id, self.scan_plc, self.pending = None, None, {}

    def derive(self, entity: str, r: TraceRecord) -> None:
        for token in r.reads or []:
            cause = self.resolve(token, r.plc)
            if cause is not None:
                self.g.add_edge(entity, cause, Relation.WAS_DERIVED_FROM)

    def require_scan(self, r: TraceRecord) -> None:
        if self.scan_id is None or self.scan_plc != r.plc:
            raise TraceFormatError(f"{r.kind.value} at tick {r.tick} seq {r.seq} outside a scan of {r.plc}")


# ============================================================================
# Macro contraction
# ============================================================================


def reading_regime(value: Any, catalog: SystemCatalog, device: str) -> str:
    """Band of a reading against the sensor's normal range, or the value for discrete sensors."""
    info = catalog.sensors.get(device)
    if info is None or info.type not in (SignalType.INT, SignalType.FLOAT):
        return value_repr(value)
    if info.normal_range is None:
        return "any"
    low, high = info.normal_range
    if value < low:
        return "low"
    if value > high:
        return "high"
    return "in"


def _contract(micro: ProvGraph) -> ProvGraph:
    macro = ProvGraph(Level.MACRO, micro.catalog, micro.meta)
    mapping: dict[str, str] = {}

    # Sibling sensors of one feature share runs; same-tick readings join the open run.
    runs: list[list[ProvNode]] = []
    open_runs: dict[tuple, list[ProvNode]] = {}
    for reading in micro.nodes(NodeType.READING):
        regime = reading_regime(reading.value, micro.catalog, reading.device)
        key = (reading.feature or reading.device, regime, reading.origin)
        run = open_runs.get(key)
        if run is not None and reading.tick <= run[-1].tick + 1:
            run.append(reading)
            continue
        run = [reading]
        runs.append(run)
        open_runs[key] = run
    for run in runs:
        first, last = run[0], run[-1]
        feature = first.feature or first.device
        regime = reading_regime(first.value, micro.catalog, first.device)
        devices = sorted({node.device for node in run})
        plcs = {node.plc for node in run}
        names = {node.name for node in run}
        interval = macro.add_node(
            ProvNode(
                id=node_id("fi", feature, regime, first.origin, first.tick),
                type=NodeType.FEATURE_INTERVAL,
                label=f"{feature} {regime} [{first.tick},{last.tick + 1})",
                tick=first.tick,
                end_tick=last.tick + 1,
                phase=first.phase,
                seq=first.seq,
                plc=first.plc if len(plcs) == 1 else None,
                name=first.name if len(names) == 1 else None,
                device=devices[0] if len(devices) == 1 else None,
                devices=devices,
                feature=first.feature,
                value=first.value,
                origin=first.origin,
                members=[node.id for node in run],
            )
        )
        mapping.update({node.id: interval for node in run})

    actions: dict[tuple[str, int], list[ProvNode]] = {}
    for command in micro.nodes(NodeType.COMMAND):
        actions.setdefault((command.device, command.tick), []).append(command)
    for (device, tick), members in sorted(actions.items()):
        first, last = members[0], members[-1]
        action = macro.add_node(
            ProvNode(
                id=node_id("aa", device, tick),
                type=NodeType.ACTUATOR_ACTION,
                label=f"{device} -> {value_repr(last.value)} @{tick}",
                tick=tick,
                phase=first.phase,
                seq=first.seq,
                plc=first.plc,
                name=first.name,
                device=device,
                value=last.value,
                origin=last.origin,
                by=OPERATOR_AGENT if all(m.by == OPERATOR_AGENT for m in members) else None,
                members=[m.id for m in members],
            )
        )
        mapping.update({m.id: action for m in members})

    for node in micro.nodes():
        if node.id not in mapping:
            mapping[node.id] = macro.add_node(node)
    for edge in micro.edges():
        src, dst = mapping[edge.src], mapping[edge.dst]
        if src != dst:
            macro.add_edge(src, dst, edge.relation)
    return macro


# ============================================================================
# Public API
# ============================================================================


def build_graph(trace: TraceLog, level: Union[Level, str] = Level.MICRO) -> ProvGraph:
    """
    Build the provenance graph of a trace.

    Args:
        trace: Parsed trace
        level: micro keeps every record, macro contracts readings and commands

    Returns:
        ProvGraph with canonical node and edge order
    """
    level = Level(level)
    header = trace.header
    meta = {
        "scenario": header.scenario,
        "scenario_hash": header.scenario_hash,
        "seed": header.seed,
        "ticks": header.ticks,
    }
    micro = ProvGraph(Level.MICRO, trace.catalog, meta)
    builder = _MicroBuilder(micro)
    for record in trace.records:
        builder.feed(record)
    builder.finish_tick()
    g = _contract(micro) if level == Level.MACRO else micro
    logger.info(
        "Provenance graph built",
        extra={"level": level.value, "nodes": len(g), "edges": g.graph.number_of_edges()},
    )
    return g.canonicalize()


def _reachable(g: ProvGraph, node_id: str, max_depth: Optional[int] = None) -> dict[str, int]:
    g.node(node_id)
    if max_depth is not None and max_depth < 0:
        raise ValidationError("max_depth must be non-negative", details={"max_depth": max_depth})
    return nx.single_source_shortest_path_length(g.graph, node_id, cutoff=max_depth)


def ancestors(g: ProvGraph, node_id: str, max_depth: Optional[int] = None) -> ProvGraph:
    """
    Induced subgraph of everything ``node_id`` causally depends on, itself included.

    Raises:
        NotFoundError: If the node does not exist
    """
    return g.subgraph(_reachable(g, node_id, max_depth))


def ancestor_ids(g: ProvGraph, node_id: str) -> set[str]:
    return set(_reachable(g, node_id)) - {node_id}


def derivation_ancestors(g: ProvGraph, node_id: str) -> set[str]:
    """Entities reachable through ``wasDerivedFrom`` edges only."""
    g.node(node_id)
    view = nx.subgraph_view(
        g.graph, filter_edge=lambda u, v, k: k == Relation.WAS_DERIVED_FROM
    )
    return nx.descendants(view, node_id)


def derived_dependents(g: ProvGraph, node_id: str) -> set[str]:
    """Entities whose derivation closure contains ``node_id``."""
    g.node(node_id)
    view = nx.subgraph_view(
        g.graph, filter_edge=lambda u, v, k: k == Relation.WAS_DERIVED_FROM
    )
    return nx.ancestors(view, node_id)


def causal_path(g: ProvGraph, effect: str, cause: str) -> list[str]:
    """
    Shortest chain from ``cause`` to ``effect`` over generation and usage edges.

    Returns:
        Node ids in chronological order, or [] when no such chain exists
    """
    view = nx.subgraph_view(
        g.graph,
        filter_edge=lambda u, v, k: k in (Relation.USED, Relation.WAS_GENERATED_BY),
    )
    try:
        path = nx.shortest_path(view, effect, cause)
    except (nx.NetworkXNoPath, nx.NodeNotFound):
        return []
    return list(reversed(path))


def commands_at(g: ProvGraph, actuator_id: str, t0: int, t1: int) -> list[ProvNode]:
    """
    Command entities for an actuator with ``t0 <= tick < t1``, ordered by (tick, seq).

    On a macro graph the contracted actuator actions are returned.

    Raises:
        ValidationError: If the window is empty
        NotFoundError: If the actuator is unknown
    """
    if t0 >= t1:
        raise ValidationError("Window must satisfy t0 < t1", details={"t0": t0, "t1": t1})
    if actuator_id not in g.catalog.actuators:
        raise NotFoundError("Actuator not found", resource_type="Actuator", resource_id=actuator_id)
    return [
        node
        for node in g.nodes(*COMMAND_TYPES)
        if node.device == actuator_id and t0 <= node.tick < t1
    ]


def influencing_sensors(g: ProvGraph, command_id: str) -> set[str]:
    """Sensor ids of the readings a command was derived from."""
    node = g.node(command_id)
    if node.type not in COMMAND_TYPES:
        raise ValidationError("Not a command", details={"node": command_id, "type": node.type.value})
    found: set[str] = set()
    for ancestor in derivation_ancestors(g, command_id):
        node = g.node(ancestor)
        if node.type in READING_TYPES:
            found.update(node.devices or [node.device])
    return found


# ============================================================================
# Invariants
# ============================================================================


def check_invariants(g: ProvGraph) -> list[str]:
    """
    Structural checks of a built graph.

    Returns:
        Human-readable violations; empty when the graph is sound
    """
    problems = []
    if not nx.is_directed_acyclic_graph(g.graph):
        problems.append("graph contains a cycle")
    for edge in g.edges():
        src, dst = g.node(edge.src), g.node(edge.dst)
        if (src.kind, dst.kind) != EDGE_TYPING[edge.relation]:
            problems.append(f"{edge.relation.value} from {src.type.value} to {dst.type.value}: {edge.src}")
        if src.kind != NodeKind.AGENT and dst.kind != NodeKind.AGENT and not dst.order_key < src.order_key:
            problems.append(f"edge {edge.src} -> {edge.dst} runs forward in time")
    for command in g.nodes(*COMMAND_TYPES):
        if command.by == OPERATOR_AGENT or g.is_operator_attributed(command.id):
            continue
        lineage = ancestor_ids(g, command.id)
        if not any(
            g.node(a).type in READING_TYPES or g.is_operator_attributed(a) for a in lineage
        ):
            problems.append(f"command {command.id} has no reading or operator lineage")
    return problems


def quotient_violations(micro: ProvGraph, macro: ProvGraph) -> list[str]:
    """Check that the macro graph is the self-loop-free quotient of the micro graph."""
    mapping = {}
    for node in macro.nodes():
        for member in node.members or [node.id]:
            mapping[member] = node.id
    problems = [f"micro node {n.id} has no macro image" for n in micro.nodes() if n.id not in mapping]
    image = set()
    for edge in micro.edges():
        src, dst = mapping.get(edge.src), mapping.get(edge.dst)
        if src is not None and dst is not None and src != dst:
            image.add((src, dst, edge.relation))
    present = set()
    for edge in macro.edges():
        present.add((edge.src, edge.dst, edge.relation))
        if (edge.src, edge.dst, edge.relation) not in image:
            problems.append(
                f"macro edge {edge.src} -{edge.relation.value}-> {edge.dst} has no micro preimage"
            )
    for src, dst, relation in sorted(image - present):
        problems.append(f"micro edge image {src} -{relation.value}-> {dst} missing at macro level")
    if not nx.is_directed_acyclic_graph(macro.graph):
        problems.append("macro graph contains a cycle")
    return problems


# ============================================================================
# Export
# ============================================================================


class ProvJsonDocument(StrictModel):
    format: str = PROVJSON_FORMAT
    version: int = PROVJSON_VERSION
    level: Level
    meta: dict[str, Any] = Field(default_factory=dict)
    catalog: SystemCatalog = Field(default_factory=SystemCatalog)
    nodes: list[ProvNode] = Field(default_factory=list)
    edges: list[ProvEdge] = Field(default_factory=list)


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def export_graph(g: ProvGraph, fmt: str = "provjson", highlight: Iterable[str] = ()) -> bytes:
    """
    Serialize a graph as ProvJson or Graphviz dot.

    Args:
        g: Graph to serialize
        fmt: "provjson" or "dot"
        highlight: Node ids filled red in dot output

    Returns:
        ASCII bytes, identical for identical graphs
    """
    if fmt == "provjson":
        doc = ProvJsonDocument(
            level=g.level, meta=g.meta, catalog=g.catalog, nodes=g.nodes(), edges=g.edges()
        )
        return (canonical_json(doc.model_dump(mode="json", exclude_none=True)) + "\n").encode("ascii")
    if fmt != "dot":
        raise ValidationError("Unknown graph format", details={"format": fmt})
    marked = set(highlight)
    lines = [f'digraph "prov_{g.level.value}" {{', "  rankdir=BT;"]
    for node in g.nodes():
        attrs = f'label="{_dot_escape(node.label or node.id)}", shape={DOT_SHAPES[node.kind]}'
        if node.id in marked:
            attrs += ', style=filled, fillcolor="#f4a6a6"'
        lines.append(f'  "{node.id}" [{attrs}];')
    for edge in g.edges():
        lines.append(f'  "{edge.src}" -> "{edge.dst}" [label="{edge.relation.value}"];')
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("ascii")


def load_graph(data: Union[bytes, str]) -> ProvGraph:
    """
    Load a ProvJson export.

    Raises:
        ValidationError: If the document is not a supported ProvJson graph
    """
    try:
        doc = ProvJsonDocument.model_validate_json(data)
    except PydanticValidationError as ex:
        raise ValidationError("Invalid ProvJson document", details={"errors": ex.error_count()}) from ex
    if doc.format != PROVJSON_FORMAT or doc.version != PROVJSON_VERSION:
        raise ValidationError(
            "Unsupported ProvJson document", details={"format": doc.format, "version": doc.version}
        )
    g = ProvGraph(doc.level, doc.catalog, doc.meta)
    for node in doc.nodes:
        g.add_node(node)
    for edge in doc.edges:
        if edge.src not in g or edge.dst not in g:
            raise ValidationError("Edge references unknown node", details={"edge": edge.model_dump()})
        g.add_edge(edge.src, edge.dst, edge.relation)
    return g.canonicalize()
