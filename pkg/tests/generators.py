"""
Random system generation for property tests.

Topologies, programs, plant, run inputs and policies are drawn together so
that every piece validates against the others.
"""

from typing import Any

from hypothesis import strategies as st

from models import Topology  # type: ignore
from services.logic import PlcProgram  # type: ignore
from services.plant import (  # type: ignore
    AttackScript,
    Disturbance,
    FeatureDynamics,
    OperatorAction,
    PlantParams,
    run_simulation,
)
from services.policy import parse_policies  # type: ignore
from services.trace import TraceLog  # type: ignore

ZONES = ["zone-a", "zone-b", "zone-c"]
OPERATOR_POINT = "hmi"
MODES = ["idle", "low", "high"]
LEVELS = st.floats(min_value=0.0, max_value=100.0, allow_nan=False, allow_infinity=False)


def _const(value: Any) -> dict:
    return {"op": "const", "value": value}


def _var(name: str) -> dict:
    return {"op": "var", "name": name}


def _signal_values(var: dict) -> st.SearchStrategy:
    if var["type"] == "float":
        return LEVELS
    if var["type"] == "bool":
        return st.booleans()
    return st.sampled_from(var["values"])


def _feature_values(feature: dict) -> st.SearchStrategy:
    if feature["kind"] == "continuous":
        return LEVELS
    if feature.get("values"):
        return st.sampled_from(feature["values"])
    return st.booleans()


# ============================================================================
# Programs
# ============================================================================


@st.composite
def _predicates(draw: Any, var: dict) -> dict:
    """A value predicate that fits the variable's type."""
    if var["type"] == "float":
        return {"op": draw(st.sampled_from(["lt", "le", "gt", "ge"])), "value": draw(LEVELS)}
    if var["type"] == "bool":
        return {"op": draw(st.sampled_from(["eq", "ne"])), "value": draw(st.booleans())}
    if draw(st.booleans()):
        return {"op": "eq", "value": draw(st.sampled_from(var["values"]))}
    members = draw(st.lists(st.sampled_from(var["values"]), min_size=1, unique=True))
    return {"op": "in", "values": members}


def _predicate_expr(name: str, predicate: dict) -> dict:
    if predicate["op"] == "in":
        return {"op": "in", "args": [_var(name)], "values": predicate["values"]}
    return {"op": predicate["op"], "args": [_var(name), _const(predicate["value"])]}


@st.composite
def _conditions(draw: Any, plc: dict, inbound: list[str]) -> dict:
    inputs = [v for v in plc["variables"] if v["direction"] == "in"]
    outputs = [v for v in plc["variables"] if v["direction"] != "in"]
    kind = draw(st.sampled_from(["input", "memory"] + (["message"] if inbound else [])))
    if kind == "input":
        var = draw(st.sampled_from(inputs))
        return _predicate_expr(var["name"], draw(_predicates(var)))
    if kind == "memory":
        var = draw(st.sampled_from(outputs))
        return {"op": "eq", "args": [_var(var["name"]), _const(draw(_signal_values(var)))]}
    channel = draw(st.sampled_from(inbound))
    payload = {"op": "eq", "args": [{"op": "payload", "channel": channel}, _const(draw(st.booleans()))]}
    return {"op": "and", "args": [{"op": "received", "channel": channel}, payload]}


@st.composite
def _rules(draw: Any, plc: dict, inbound: list[str], outbound: list[str]) -> dict:
    condition = draw(_conditions(plc, inbound))
    if draw(st.booleans()):
        other = draw(_conditions(plc, inbound))
        condition = {"op": draw(st.sampled_from(["and", "or"])), "args": [condition, other]}
    writable = [v for v in plc["variables"] if v["direction"] != "in"]
    flags = [v["name"] for v in plc["variables"] if v["direction"] == "in" and v["type"] == "bool"]
    actions = []
    for _ in range(draw(st.integers(min_value=1, max_value=2))):
        if outbound and draw(st.integers(min_value=0, max_value=3)) == 0:
            sources = [_const(draw(st.booleans())), _var("latch"), *(_var(name) for name in flags)]
            channel = draw(st.sampled_from(outbound))
            actions.append({"kind": "send", "channel": channel, "expr": draw(st.sampled_from(sources))})
        else:
            var = draw(st.sampled_from(writable))
            value = draw(_signal_values(var))
            actions.append({"kind": "assign", "target": var["name"], "expr": _const(value)})
    return {"condition": condition, "actions": actions}


# ============================================================================
# Policies
# ============================================================================


@st.composite
def _permits(draw: Any, sensors: dict, points: list[str]) -> list[dict]:
    permits: list[dict] = []
    for _ in range(draw(st.integers(min_value=0, max_value=2))):
        if draw(st.integers(min_value=0, max_value=3)) == 0:
            permits.append({"operator": True})
            continue
        sensor = draw(st.sampled_from(sorted(sensors)))
        condition = {"sensor": sensor, **draw(_predicates(sensors[sensor]))}
        origin = draw(st.one_of(st.none(), st.sampled_from(points)))
        if origin is not None:
            condition["origin"] = origin
        permits.append(condition)
    return permits


@st.composite
def _correlations(draw: Any, sensors: dict) -> dict:
    trigger = draw(st.sampled_from(sorted(sensors)))
    corroborating = draw(st.sampled_from(sorted(sensors)))
    if sensors[corroborating]["type"] == "float" and draw(st.booleans()):
        support: dict = {"rise": draw(st.floats(min_value=-5.0, max_value=5.0, allow_nan=False))}
        over = draw(st.one_of(st.none(), st.integers(min_value=1, max_value=4)))
        if over is not None:
            support["over_ticks"] = over
    else:
        support = draw(_predicates(sensors[corroborating]))
    return {
        "kind": "correlation",
        "trigger_sensor": trigger,
        "trigger_predicate": draw(_predicates(sensors[trigger])),
        "corroborating_sensor": corroborating,
        "corroborating_predicate": support,
        "window_ticks": draw(st.integers(min_value=1, max_value=6)),
    }


@st.composite
def _policies(draw: Any, topology: dict, variables: dict) -> list[dict]:
    """Policies of every kind over the drawn topology, ids ``<kind>-<n>``."""
    points = [p["id"] for p in topology["attachment_points"]]
    sensors = {
        s["id"]: variables[(s["attaches_to"]["plc_id"], s["attaches_to"]["name"])]
        for s in topology["sensors"]
    }
    within = st.integers(min_value=1, max_value=6)
    docs: list[dict] = []
    for actuator in topology["actuators"]:
        docs.append({"kind": "duplicate_actuation", "actuator": actuator["id"], "within_ticks": draw(within)})
        docs.append(
            {"kind": "conflicting_commands", "actuator": actuator["id"], "within_ticks": draw(within)}
        )
        docs.append(
            {
                "kind": "guard",
                "actuator": actuator["id"],
                "command_value": draw(st.sampled_from(actuator["command_set"])),
                "permit": {"any_of": draw(_permits(sensors, points))},
            }
        )
    for sensor in topology["sensors"]:
        if sensor.get("normal_range"):
            minimum = draw(st.integers(min_value=1, max_value=4))
            docs.append({"kind": "range_excursion", "sensor": sensor["id"], "min_duration_ticks": minimum})
        expected = draw(st.sampled_from([sensor["origin_point"], *points]))
        docs.append({"kind": "source_binding", "sensor": sensor["id"], "expected_origin_point": expected})
    for feature in topology["features"]:
        limit = draw(st.integers(min_value=1, max_value=2))
        docs.append({"kind": "feature_contention", "feature": feature["id"], "max_concurrent": limit})
    docs.extend(draw(st.lists(_correlations(sensors), max_size=3)))
    for index, doc in enumerate(docs):
        doc["id"] = f"{doc['kind']}-{index}"
    return docs


# ============================================================================
# Run inputs
# ============================================================================


@st.composite
def _attack_steps(draw: Any, topology: dict, variables: dict, ticks: int) -> list[dict]:
    points = [p["id"] for p in topology["attachment_points"]]
    tick = st.integers(min_value=0, max_value=ticks - 1)
    steps: list[dict] = []
    for kind in draw(st.lists(st.sampled_from(["forge", "inject", "replay"]), max_size=3)):
        if kind == "forge":
            ref = draw(st.sampled_from(topology["sensors"]))["attaches_to"]
            steps.append(
                {
                    "kind": "forge_sensor",
                    "at_tick": draw(tick),
                    "plc": ref["plc_id"],
                    "variable": ref["name"],
                    "value": draw(_signal_values(variables[(ref["plc_id"], ref["name"])])),
                    "origin_point": draw(st.sampled_from(points)),
                    "duration_ticks": draw(st.integers(min_value=1, max_value=6)),
                }
            )
        elif kind == "inject" and topology["links"]:
            steps.append(
                {
                    "kind": "inject_message",
                    "at_tick": draw(tick),
                    "channel": draw(st.sampled_from(topology["links"]))["channel"],
                    "payload": draw(st.booleans()),
                    "origin_point": draw(st.sampled_from(points)),
                }
            )
        elif kind == "replay" and ticks >= 3:
            start = draw(st.integers(min_value=0, max_value=ticks - 3))
            end = draw(st.integers(min_value=start + 1, max_value=ticks - 2))
            sensor = st.sampled_from([s["id"] for s in topology["sensors"]])
            steps.append(
                {
                    "kind": "replay_window",
                    "at_tick": draw(st.integers(min_value=end, max_value=ticks - 1)),
                    "from_tick": start,
                    "to_tick": end,
                    "origin_point": draw(st.sampled_from(points)),
                    "sensor": draw(st.one_of(st.none(), sensor)),
                }
            )
    return steps


@st.composite
def _run_inputs(draw: Any, topology: dict, variables: dict, ticks: int) -> dict:
    tick = st.integers(min_value=0, max_value=ticks - 1)
    disturbances = []
    for feature in draw(st.lists(st.sampled_from(topology["features"]), max_size=3)):
        start = draw(tick)
        disturbances.append(
            Disturbance(
                feature=feature["id"],
                at_tick=start,
                until_tick=draw(st.integers(min_value=start + 1, max_value=ticks)),
                target=draw(_feature_values(feature)),
            )
        )
    writable = sorted(key for key, var in variables.items() if var["direction"] != "in")
    actions = []
    for plc_id, name in draw(st.lists(st.sampled_from(writable), max_size=3)):
        value = draw(_signal_values(variables[(plc_id, name)]))
        actions.append(OperatorAction(at_tick=draw(tick), plc=plc_id, variable=name, value=value))
    steps = draw(_attack_steps(topology, variables, ticks))
    return {
        "ticks": ticks,
        "seed": draw(st.integers(min_value=0, max_value=2**32 - 1)),
        "attack": AttackScript.model_validate({"name": "generated", "steps": steps}),
        "disturbances": disturbances,
        "operator_actions": actions,
    }


# ============================================================================
# Systems
# ============================================================================


@st.composite
def _features(draw: Any) -> list[dict]:
    kinds = draw(st.lists(st.sampled_from(["level", "flag", "mode"]), min_size=1, max_size=6))
    features = []
    for index, kind in enumerate(kinds):
        if kind == "level":
            features.append({"id": f"level{index}", "kind": "continuous", "initial_value": draw(LEVELS)})
        elif kind == "flag":
            features.append({"id": f"flag{index}", "kind": "discrete", "initial_value": draw(st.booleans())})
        else:
            features.append(
                {"id": f"mode{index}", "kind": "discrete", "initial_value": "idle", "values": MODES}
            )
    return features


@st.composite
def _sensor(draw: Any, index: int, plc: dict, features: list[dict]) -> dict:
    feature = draw(st.sampled_from(features))
    var: dict = {"name": f"s{index}_in", "direction": "in", "input_line": f"IN-{index}"}
    sensor: dict = {
        "id": f"sensor{index}",
        "measures": feature["id"],
        "attaches_to": {"plc_id": plc["id"], "name": var["name"]},
        "origin_point": plc["location"] if draw(st.booleans()) else draw(st.sampled_from(ZONES)),
    }
    if feature["kind"] == "continuous":
        var["type"] = "float"
        low = draw(st.floats(min_value=0.0, max_value=60.0, allow_nan=False))
        high = draw(st.floats(min_value=low, max_value=100.0, allow_nan=False))
        sensor["normal_range"] = [low, high]
        sensor["noise_sigma"] = draw(st.sampled_from([0.0, 0.5, 2.0]))
    elif feature.get("values"):
        var.update(type="enum", values=feature["values"])
    else:
        var["type"] = "bool"
    plc["variables"].append(var)
    return sensor


@st.composite
def _actuator(draw: Any, index: int, plc: dict, features: list[dict]) -> dict:
    commands = [f"c{j}" for j in range(draw(st.integers(min_value=2, max_value=3)))]
    var = {"name": f"a{index}_cmd", "direction": "out", "type": "enum", "values": commands, "initial": "c0"}
    by_id = {f["id"]: f for f in features}
    affects = draw(st.lists(st.sampled_from(sorted(by_id)), min_size=1, max_size=2, unique=True))
    effects = [
        {"command": command, "feature": fid, "target": draw(_feature_values(by_id[fid]))}
        for command in commands
        for fid in affects
        if draw(st.integers(min_value=0, max_value=3)) > 0
    ]
    plc["variables"].append(var)
    return {
        "id": f"actuator{index}",
        "affects": affects,
        "attaches_to": {"plc_id": plc["id"], "name": var["name"]},
        "command_set": commands,
        "effects": effects,
    }


@st.composite
def random_systems(
    draw: Any,
    max_plcs: int = 5,
    max_sensors: int = 10,
    max_actuators: int = 10,
    max_ticks: int = 300,
) -> dict:
    """
    A random valid system ready for ``run_simulation`` plus policies over it.

    Every PLC reads at least one sensor, so each command has reading lineage
    through its scan.

    Returns:
        Dict with ``topology``, ``programs``, ``plant``, ``run`` (keyword
        arguments for ``run_simulation``) and ``policies``
    """
    latch = {"name": "latch", "direction": "internal", "type": "bool", "initial": False}
    plcs = [
        {"id": f"plc{i}", "location": draw(st.sampled_from(ZONES)), "variables": [dict(latch)]}
        for i in range(draw(st.integers(min_value=1, max_value=max_plcs)))
    ]
    features = draw(_features())
    n_sensors = draw(st.integers(min_value=len(plcs), max_value=max(len(plcs), max_sensors)))
    sensors = [
        draw(_sensor(i, plcs[i] if i < len(plcs) else draw(st.sampled_from(plcs)), features))
        for i in range(n_sensors)
    ]
    actuators = [
        draw(_actuator(i, draw(st.sampled_from(plcs)), features))
        for i in range(draw(st.integers(min_value=0, max_value=max_actuators)))
    ]
    links = []
    if len(plcs) >= 2:
        ids = [plc["id"] for plc in plcs]
        for i in range(draw(st.integers(min_value=0, max_value=3))):
            src, dst = draw(st.lists(st.sampled_from(ids), min_size=2, max_size=2, unique=True))
            links.append({"channel": f"ch{i}", "src": src, "dst": dst, "payload": "bool"})

    topology = {
        "name": "generated",
        "operator_point": OPERATOR_POINT,
        "attachment_points": [{"id": point} for point in [*ZONES, OPERATOR_POINT]],
        "plcs": plcs,
        "features": features,
        "sensors": sensors,
        "actuators": actuators,
        "links": links,
    }
    variables = {(plc["id"], var["name"]): var for plc in plcs for var in plc["variables"]}

    programs = []
    for plc in plcs:
        inbound = [link["channel"] for link in links if link["dst"] == plc["id"]]
        outbound = [link["channel"] for link in links if link["src"] == plc["id"]]
        rules = draw(st.lists(_rules(plc, inbound, outbound), max_size=4))
        for index, rule in enumerate(rules):
            rule["name"] = f"r{index}"
        programs.append(PlcProgram.model_validate({"plc_id": plc["id"], "rules": rules}))

    dynamics = {
        feature["id"]: FeatureDynamics(
            alpha=draw(st.sampled_from([0.1, 0.5, 1.0])),
            decay_rate=draw(st.sampled_from([0.0, 0.05, 1.0])),
        )
        for feature in features
    }
    model = Topology.model_validate(topology)
    policies = draw(_policies(topology, variables))
    ticks = draw(st.integers(min_value=1, max_value=max_ticks))
    return {
        "topology": model,
        "programs": programs,
        "plant": PlantParams(features=dynamics),
        "run": draw(_run_inputs(topology, variables, ticks)),
        "policies": parse_policies({"policies": policies}, model.catalog()),
    }


def run_system(system: dict) -> TraceLog:
    return run_simulation(system["topology"], system["programs"], plant=system["plant"], **system["run"])
