"""Tests for the trace log format."""

import json

import pytest

from exceptions import TraceFormatError  # type: ignore
from services.trace import RecordKind, TraceHeader, loads_trace, read_trace  # type: ignore


def _lines(trace) -> list[str]:
    return trace.dumps().splitlines()


class TestTraceFormat:
    def test_round_trip_is_byte_identical(self, forged_smoke) -> None:
        trace = forged_smoke[0]
        assert loads_trace(trace.dumps()).dumps() == trace.dumps()

    def test_read_from_file(self, trace_file, forged_smoke) -> None:
        assert read_trace(trace_file) == forged_smoke[0]

    def test_header_is_self_describing(self, forged_smoke) -> None:
        header = json.loads(_lines(forged_smoke[0])[0])
        assert header["kind"] == "header"
        assert header["format"] == "plcprov-trace"
        assert header["seed"] == 7
        assert header["scenario"] == "forged_smoke"
        assert "smoke_detector" in header["catalog"]["sensors"]

    def test_optional_keys_omitted(self, forged_smoke) -> None:
        reading = json.loads(_lines(forged_smoke[0])[1])
        assert reading["kind"] == "SensorReading"
        assert "rule" not in reading and "by" not in reading

    def test_header_only(self) -> None:
        trace = loads_trace(TraceHeader(ticks=0).to_json() + "\n")
        assert trace.records == []

    def test_of_kind(self, forged_smoke) -> None:
        kinds = {r.kind for r in forged_smoke[0].of_kind("ScanBegin", RecordKind.SCAN_END)}
        assert kinds == {RecordKind.SCAN_BEGIN, RecordKind.SCAN_END}


class TestTraceErrors:
    def test_missing_header(self, forged_smoke) -> None:
        with pytest.raises(TraceFormatError) as err:
            loads_trace("\n".join(_lines(forged_smoke[0])[1:]))
        assert err.value.line == 1

    def test_empty_input(self) -> None:
        with pytest.raises(TraceFormatError):
            loads_trace("")

    def test_unsupported_version(self) -> None:
        header = json.loads(TraceHeader().to_json())
        header["version"] = 2
        with pytest.raises(TraceFormatError, match="version"):
            loads_trace(json.dumps(header))

    def test_corrupted_line_named(self, forged_smoke) -> None:
        lines = _lines(forged_smoke[0])
        lines[5] = lines[5][:-3]
        with pytest.raises(TraceFormatError) as err:
            loads_trace("\n".join(lines))
        assert err.value.line == 6

    def test_unknown_key_rejected(self, forged_smoke) -> None:
        lines = _lines(forged_smoke[0])
        record = json.loads(lines[3])
        record["note"] = "x"
        lines[3] = json.dumps(record)
        with pytest.raises(TraceFormatError) as err:
            loads_trace("\n".join(lines))
        assert err.value.line == 4

    def test_out_of_order_records(self, forged_smoke) -> None:
        lines = _lines(forged_smoke[0])
        lines[2], lines[3] = lines[3], lines[2]
        with pytest.raises(TraceFormatError, match="order") as err:
            loads_trace("\n".join(lines))
        assert err.value.line == 4

    def test_tick_beyond_horizon(self, forged_smoke) -> None:
        lines = _lines(forged_smoke[0])
        header = json.loads(lines[0])
        header["ticks"] = 1
        lines[0] = json.dumps(header)
        with pytest.raises(TraceFormatError, match="horizon"):
            loads_trace("\n".join(lines))

    def test_ms_must_match_tick(self, forged_smoke) -> None:
        lines = _lines(forged_smoke[0])
        record = json.loads(lines[1])
        record["ms"] = record["ms"] + 1
        lines[1] = json.dumps(record)
        with pytest.raises(TraceFormatError, match="ms"):
            loads_trace("\n".join(lines))
