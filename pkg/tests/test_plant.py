"""Tests for the plant simulator, attack injection and the tick loop."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from exceptions import ConfigurationError, ValidationError  # type: ignore
from models import Topology  # type: ignore
from services.plant import (  # type: ignore
    AttackScript,
    BusEvent,
    Disturbance,
    FeatureDynamics,
    PlantParams,
    PlantState,
    ReplayWindow,
    check_attack_script,
    check_run_inputs,
    run_simulation,
    sample_sensors,
    step_plant,
)
from services.trace import Phase, RecordKind  # type: ignore

from tests.conftest import read_base


@pytest.fixture(scope="module")
def params() -> PlantParams:
    return PlantParams.model_validate(read_base("plant.json"))


def attack(*steps: dict) -> AttackScript:
    return AttackScript.model_validate({"name": "t", "steps": list(steps)})


class TestStepPlant:
    def test_continuous_feature_moves_toward_target(self, topology: Topology, params) -> None:
        state = PlantState.initial(topology)
        after = step_plant(state, {"thermostat": "raise"}, params, topology)
        # office_temp: 21 + 0.1 * (24 - 21)
        assert after.feature_values["office_temp"] == pytest.approx(21.3)
        assert after.tick == 1

    def test_first_order_response_matches_closed_form(self, topology: Topology) -> None:
        params = PlantParams(features={"office_temp": FeatureDynamics(alpha=0.1, decay_rate=0.0)})
        state = PlantState.initial(topology)
        for n in range(1, 101):
            state = step_plant(state, {"thermostat": "raise"}, params, topology)
            expected = 24.0 - 3.0 * 0.9**n
            assert state.feature_values["office_temp"] == pytest.approx(expected, rel=1e-12)

    def test_conflicting_targets_average(self, topology: Topology, params) -> None:
        state = PlantState.initial(topology)
        drive = [Disturbance(feature="office_temp", at_tick=0, until_tick=5, target=18.0)]
        after = step_plant(state, {"thermostat": "raise"}, params, topology, drive)
        assert after.feature_values["office_temp"] == pytest.approx(21.0)

    def test_discrete_feature_takes_command(self, topology: Topology, params) -> None:
        after = step_plant(PlantState.initial(topology), {"door_lock": "unlock"}, params, topology)
        assert after.feature_values["door_locked"] is False

    def test_undriven_discrete_feature_decays_to_ambient(self, topology: Topology, params) -> None:
        state = PlantState.initial(topology)
        drive = [Disturbance(feature="smoke_present", at_tick=0, until_tick=1, target=True)]
        smoky = step_plant(state, {}, params, topology, drive)
        assert smoky.feature_values["smoke_present"] is True
        cleared = step_plant(smoky, {}, params, topology, drive)
        assert cleared.feature_values["smoke_present"] is False

    def test_unknown_actuator(self, topology: Topology, params) -> None:
        with pytest.raises(ValidationError):
            step_plant(PlantState.initial(topology), {"sprinkler": "on"}, params, topology)

    @given(st.lists(st.sampled_from(["raise", "lower", "hold"]), min_size=1, max_size=60))
    def test_continuous_values_stay_within_targets(self, topology: Topology, commands) -> None:
        # alpha in (0, 1] keeps the state inside the hull of initial value and targets
        params = PlantParams(features={"office_temp": FeatureDynamics(alpha=0.7, decay_rate=0.3)})
        state = PlantState.initial(topology)
        for command in commands:
            state = step_plant(state, {"thermostat": command}, params, topology)
            assert 18.0 - 1e-9 <= state.feature_values["office_temp"] <= 24.0 + 1e-9


class TestSampling:
    def test_one_reading_per_sensor_in_id_order(self, topology: Topology) -> None:
        events = sample_sensors(PlantState.initial(topology), topology, seed=1, tick=0)
        assert [e.device for e in events] == sorted(s.id for s in topology.sensors)
        assert [e.seq for e in events] == list(range(len(events)))
        assert {e.origin for e in events if e.device == "smoke_detector"} == {"secure-area"}

    def test_noise_is_seeded(self, topology_data: dict) -> None:
        topology_data["sensors"][3]["noise_sigma"] = 0.5
        noisy = Topology.model_validate(topology_data)
        state = PlantState.initial(noisy)
        first = sample_sensors(state, noisy, seed=3, tick=10)
        again = sample_sensors(state, noisy, seed=3, tick=10)
        other = sample_sensors(state, noisy, seed=4, tick=10)
        assert first == again
        assert first != other


class TestAttackScripts:
    def test_rejects_step_after_horizon(self, topology: Topology) -> None:
        script = attack(
            {
                "kind": "forge_sensor",
                "at_tick": 500,
                "plc": "safety",
                "variable": "smoke_in",
                "value": True,
                "origin_point": "common-area",
            }
        )
        assert [e.rule for e in check_attack_script(script, topology, ticks=200)] == ["horizon"]

    def test_rejects_unknown_origin_and_channel(self, topology: Topology) -> None:
        script = attack(
            {
                "kind": "inject_message",
                "at_tick": 5,
                "channel": "backdoor",
                "payload": True,
                "origin_point": "parking",
            }
        )
        rules = {e.rule for e in check_attack_script(script, topology, ticks=200)}
        assert rules == {"origin-ref", "channel-ref"}

    def test_replay_window_offsets(self) -> None:
        step = ReplayWindow(at_tick=50, from_tick=10, to_tick=20, origin_point="common-area")
        assert step.source_tick(49) is None
        assert step.source_tick(50) == 10
        assert step.source_tick(59) == 19
        assert step.source_tick(60) is None

    def test_run_rejects_invalid_script(self, topology: Topology) -> None:
        script = attack(
            {
                "kind": "forge_sensor",
                "at_tick": 1,
                "plc": "safety",
                "variable": "alarm_cmd",
                "value": "on",
                "origin_point": "common-area",
            }
        )
        with pytest.raises(ConfigurationError) as err:
            run_simulation(topology, [], ticks=5, attack=script)
        assert any("variable-ref" in issue for issue in err.value.details["issues"])


class TestRunSimulation:
    def test_zero_ticks_gives_header_only(self, topology: Topology) -> None:
        trace = run_simulation(topology, [], ticks=0, seed=7)
        assert trace.records == []
        assert trace.header.seed == 7
        assert trace.dumps().count("\n") == 1

    def test_rejects_negative_seed(self, topology: Topology) -> None:
        with pytest.raises(ValidationError):
            run_simulation(topology, [], ticks=1, seed=-1)

    def test_tick_structure(self, topology: Topology) -> None:
        trace = run_simulation(topology, [], ticks=2)
        tick0 = [r for r in trace.records if r.tick == 0]
        readings = [r for r in tick0 if r.kind == RecordKind.SENSOR_READING]
        assert len(readings) == len(topology.sensors)
        assert [r.seq for r in tick0] == list(range(len(tick0)))
        scans = [r.plc for r in tick0 if r.kind == RecordKind.SCAN_BEGIN]
        assert scans == ["environmental", "safety", "security"]
        assert all(r.phase == Phase.SAMPLE for r in readings)

    def test_forged_reading_keeps_conservation(self, topology: Topology) -> None:
        script = attack(
            {
                "kind": "forge_sensor",
                "at_tick": 3,
                "plc": "safety",
                "variable": "smoke_in",
                "value": True,
                "origin_point": "common-area",
            }
        )
        trace = run_simulation(topology, [], ticks=5, attack=script)
        smoke = [r for r in trace.of_kind(RecordKind.SENSOR_READING) if r.device == "smoke_detector"]
        assert len(smoke) == 5
        assert [(r.value, r.origin) for r in smoke if r.tick == 3] == [(True, "common-area")]
        assert all(r.origin == "secure-area" for r in smoke if r.tick != 3)

    def test_injected_message_is_published_and_delivered(self, bundle_loader) -> None:
        bundle = bundle_loader("none")
        script = attack(
            {
                "kind": "inject_message",
                "at_tick": 10,
                "channel": "hazard",
                "payload": True,
                "origin_point": "common-area",
            }
        )
        trace = run_simulation(bundle.topology, bundle.programs, ticks=15, attack=script)
        published = [r for r in trace.records if r.phase == Phase.PUBLISH]
        assert [(r.tick, r.origin, r.dst) for r in published] == [(10, "common-area", "security")]
        unlocks = [
            r
            for r in trace.of_kind(RecordKind.ACTUATOR_COMMAND)
            if r.device == "door_lock" and r.value == "unlock"
        ]
        assert [r.tick for r in unlocks] == [11]
        assert unlocks[0].reads == ["msg:hazard"]

    def test_operator_actions_recorded(self, bundle_loader) -> None:
        bundle = bundle_loader("fire_drill")
        trace = run_simulation(
            bundle.topology,
            bundle.programs,
            ticks=bundle.manifest.ticks,
            seed=bundle.manifest.seed,
            plant=bundle.plant,
            disturbances=bundle.manifest.disturbances,
            operator_actions=bundle.manifest.operator_actions,
        )
        by_operator = [r for r in trace.records if r.by == "operator"]
        assert by_operator
        assert all(r.phase == Phase.OPERATOR and r.origin == "hmi" for r in by_operator)

    def test_rejects_disturbance_targets_that_do_not_fit(self, topology: Topology) -> None:
        drives = [
            Disturbance(feature="office_temp", at_tick=0, until_tick=2, target="hot"),
            Disturbance(feature="smoke_present", at_tick=0, until_tick=2, target=2.5),
            Disturbance(feature="badge", at_tick=0, until_tick=2, target="card_00"),
            Disturbance(feature="badge", at_tick=0, until_tick=2, target="card_42"),
        ]
        errors = check_run_inputs(topology, drives, [])
        assert [(e.element, e.rule) for e in errors] == [
            ("disturbance[0]", "type"),
            ("disturbance[1]", "type"),
            ("disturbance[2]", "type"),
        ]
        with pytest.raises(ConfigurationError):
            run_simulation(topology, [], ticks=3, disturbances=drives[:1])

    def test_same_inputs_same_trace(self, bundle_loader) -> None:
        bundle = bundle_loader("forged_smoke")
        runs = [
            run_simulation(
                bundle.topology, bundle.programs, ticks=60, seed=7, attack=bundle.manifest.attack
            )
            for _ in range(2)
        ]
        first, second = runs
        assert first.dumps() == second.dumps()

    def test_bus_event_defaults(self) -> None:
        event = BusEvent(
            tick=0, kind=RecordKind.SENSOR_READING, plc="p", name="x", value=1.0, origin="o"
        )
        assert event.seq == 0 and event.device is None
