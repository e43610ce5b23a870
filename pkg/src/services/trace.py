"""
Trace Log Module

JSON Lines trace of a simulation run: one header line followed by one record
per bus event, scan boundary and fault, in (tick, phase, seq) order.
Serialization goes through canonical JSON so identical runs produce
byte-identical files.
"""

import json
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Literal, Optional, Union

from aws_lambda_powertools import Logger
from pydantic import Field
from pydantic import ValidationError as PydanticValidationError

from exceptions import TraceFormatError  # type: ignore
from helper import SERVICE_NAME, canonical_json  # type: ignore
from models import Direction, SignalValue, StrictModel, SystemCatalog  # type: ignore

logger = Logger(service=SERVICE_NAME, child=True)

TRACE_FORMAT = "plcprov-trace"
TRACE_VERSION = 1


class Phase(str, Enum):
    SAMPLE = "sample"
    SCAN = "scan"
    OPERATOR = "operator"
    PUBLISH = "publish"


PHASE_ORDER = {phase: index for index, phase in enumerate(Phase)}


class RecordKind(str, Enum):
    SENSOR_READING = "SensorReading"
    SCAN_BEGIN = "ScanBegin"
    VARIABLE_WRITE = "VariableWrite"
    ACTUATOR_COMMAND = "ActuatorCommand"
    INTER_PLC_MESSAGE = "InterPlcMessage"
    SCAN_FAULT = "ScanFault"
    SCAN_END = "ScanEnd"


class VarTag(StrictModel):
    name: str
    dir: Direction
    line: Optional[str] = None


class TraceRecord(StrictModel):
    """One timestamped observation with its source attribution."""

    tick: int = Field(..., ge=0)
    ms: int = Field(..., ge=0)
    phase: Phase
    kind: RecordKind
    seq: int = Field(..., ge=0)
    plc: Optional[str] = None
    var: Optional[VarTag] = None
    channel: Optional[str] = None
    value: Optional[SignalValue] = None
    origin: Optional[str] = None
    device: Optional[str] = None
    dst: Optional[str] = None
    rule: Optional[int] = None
    reads: Optional[list[str]] = None
    by: Optional[Literal["operator"]] = None
    message: Optional[str] = None

    @property
    def order_key(self) -> tuple[int, int, int]:
        return (self.tick, PHASE_ORDER[self.phase], self.seq)

    def to_json(self) -> str:
        return canonical_json(self.model_dump(mode="json", exclude_none=True))


class TraceHeader(StrictModel):
    kind: Literal["header"] = "header"
    format: Literal["plcprov-trace"] = TRACE_FORMAT
    version: int = TRACE_VERSION
    seed: int = 0
    scenario: str = ""
    scenario_hash: str = ""
    ticks: int = Field(default=0, ge=0)
    catalog: SystemCatalog = Field(default_factory=SystemCatalog)

    def to_json(self) -> str:
        return canonical_json(self.model_dump(mode="json", exclude_none=True))


class TraceLog(StrictModel):
    header: TraceHeader
    records: list[TraceRecord] = Field(default_factory=list)

    @property
    def catalog(self) -> SystemCatalog:
        return self.header.catalog

    def of_kind(self, *kinds: Union[RecordKind, str]) -> Iterator[TraceRecord]:
        wanted = {RecordKind(kind) for kind in kinds}
        return (record for record in self.records if record.kind in wanted)

    def dumps(self) -> str:
        lines = [self.header.to_json()]
        lines.extend(record.to_json() for record in self.records)
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")
        logger.info("Trace written", extra={"path": str(path), "records": len(self.records)})


# ============================================================================
# Reading
# ============================================================================


def _parse_line(raw: str, number: int) -> dict[str, Any]:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as ex:
        raise TraceFormatError(f"invalid JSON: {ex.msg}", line=number) from ex
    if not isinstance(data, dict):
        raise TraceFormatError("trace line is not an object", line=number)
    return data


def parse_trace(lines: Iterable[str]) -> TraceLog:
    """
    Parse and order-check trace lines.

    Raises:
        TraceFormatError: Naming the 1-based line number of the first bad line
    """
    header: Optional[TraceHeader] = None
    records: list[TraceRecord] = []
    last_key: Optional[tuple[int, int, int]] = None
    last_seq = -1
    last_tick = -1

    for number, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        data = _parse_line(raw, number)
        if header is None:
            if data.get("kind") != "header" or data.get("format") != TRACE_FORMAT:
                raise TraceFormatError("first line must be a plcprov-trace header", line=number)
            if data.get("version") != TRACE_VERSION:
                raise TraceFormatError(
                    f"unsupported trace version {data.get('version')!r}", line=number
                )
            try:
                header = TraceHeader.model_validate(data)
            except PydanticValidationError as ex:
                raise TraceFormatError(f"invalid header: {ex.errors()[0]['msg']}", line=number) from ex
            continue
        try:
            record = TraceRecord.model_validate(data)
        except PydanticValidationError as ex:
            raise TraceFormatError(f"invalid record: {ex.errors()[0]['msg']}", line=number) from ex
        if record.tick >= header.ticks:
            raise TraceFormatError(f"tick {record.tick} beyond horizon {header.ticks}", line=number)
        if record.ms != record.tick * header.catalog.ms_per_tick:
            raise TraceFormatError("ms does not match tick", line=number)
        if record.tick != last_tick:
            last_seq = -1
            last_tick = record.tick
        if (last_key is not None and record.order_key < last_key) or record.seq <= last_seq:
            raise TraceFormatError("record out of (tick, phase, seq) order", line=number)
        last_key = record.order_key
        last_seq = record.seq
        records.append(record)

    if header is None:
        raise TraceFormatError("empty trace: missing header", line=1)
    logger.debug("Trace parsed", extra={"records": len(records), "scenario": header.scenario})
    return TraceLog(header=header, records=records)


def read_trace(path: Union[str, Path]) -> TraceLog:
    with open(path, encoding="utf-8") as handle:
        return parse_trace(handle)


def loads_trace(text: str) -> TraceLog:
    return parse_trace(text.splitlines())
