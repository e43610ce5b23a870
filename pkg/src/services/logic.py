"""
PLC Logic Engine Module

Evaluates a PLC program for one scan cycle against a frozen snapshot of its
inputs, memory and inbox. Every write and message carries the rule that
produced it and the read-set of that rule, which is what provenance
derivation edges are built from.
"""

import math
from enum import Enum
from typing import Any, Literal, Optional, Sequence

from aws_lambda_powertools import Logger
from pydantic import Field, model_validator

from exceptions import ScanFault  # type: ignore
from helper import SERVICE_NAME  # type: ignore
from models import (  # type: ignore
    NUMERIC_TYPES,
    Direction,
    Identifier,
    PlcSpec,
    SignalType,
    SignalValue,
    StrictModel,
    Topology,
    compare_signal,
    value_matches,
    value_type,
)

logger = Logger(service=SERVICE_NAME, child=True)

INT64_MAX = 2**63 - 1


class ExprOp(str, Enum):
    CONST = "const"
    VAR = "var"
    RECEIVED = "received"
    PAYLOAD = "payload"
    TICK = "tick"
    ELAPSED_SINCE = "elapsed_since"
    NOT = "not"
    AND = "and"
    OR = "or"
    EQ = "eq"
    NE = "ne"
    LT = "lt"
    LE = "le"
    GT = "gt"
    GE = "ge"
    ADD = "add"
    SUB = "sub"
    IN = "in"


COMPARISONS = frozenset({ExprOp.EQ, ExprOp.NE, ExprOp.LT, ExprOp.LE, ExprOp.GT, ExprOp.GE})
ORDERINGS = frozenset({ExprOp.LT, ExprOp.LE, ExprOp.GT, ExprOp.GE})
ARITY = {
    ExprOp.CONST: (0, 0),
    ExprOp.VAR: (0, 0),
    ExprOp.RECEIVED: (0, 0),
    ExprOp.PAYLOAD: (0, 0),
    ExprOp.TICK: (0, 0),
    ExprOp.ELAPSED_SINCE: (0, 0),
    ExprOp.NOT: (1, 1),
    ExprOp.AND: (2, None),
    ExprOp.OR: (2, None),
    ExprOp.ADD: (2, 2),
    ExprOp.SUB: (2, 2),
    ExprOp.IN: (1, 1),
    **{op: (2, 2) for op in COMPARISONS},
}


# ============================================================================
# Program model
# ============================================================================


class Expr(StrictModel):
    """Expression tree node. Leaves name a constant, variable, channel or the tick."""

    op: ExprOp
    value: Optional[SignalValue] = None
    name: Optional[Identifier] = None
    channel: Optional[Identifier] = None
    args: list["Expr"] = Field(default_factory=list)
    values: Optional[list[SignalValue]] = None

    @model_validator(mode="after")
    def check_shape(self) -> "Expr":
        low, high = ARITY[self.op]
        if len(self.args) < low or (high is not None and len(self.args) > high):
            raise ValueError(f"'{self.op.value}' takes {low}..{high or 'n'} operands")
        if self.op == ExprOp.CONST and self.value is None:
            raise ValueError("'const' needs a value")
        if self.op in (ExprOp.VAR, ExprOp.ELAPSED_SINCE) and not self.name:
            raise ValueError(f"'{self.op.value}' needs a name")
        if self.op in (ExprOp.RECEIVED, ExprOp.PAYLOAD) and not self.channel:
            raise ValueError(f"'{self.op.value}' needs a channel")
        if self.op == ExprOp.IN and not self.values:
            raise ValueError("'in' needs a non-empty values list")
        return self


class Action(StrictModel):
    """Assign a variable or send on a channel."""

    kind: Literal["assign", "send"]
    target: Optional[Identifier] = None
    channel: Optional[Identifier] = None
    expr: Expr

    @model_validator(mode="after")
    def check_destination(self) -> "Action":
        if self.kind == "assign" and not self.target:
            raise ValueError("assign needs a target")
        if self.kind == "send" and not self.channel:
            raise ValueError("send needs a channel")
        return self


class Rule(StrictModel):
    name: str = ""
    condition: Expr
    actions: list[Action] = Field(default_factory=list)


class PlcProgram(StrictModel):
    """Ordered rules for one PLC."""

    plc_id: Identifier
    rules: list[Rule] = Field(default_factory=list)


class InboxMessage(StrictModel):
    channel: str
    payload: SignalValue
    src: str = ""


class WriteRecord(StrictModel):
    variable: str
    value: SignalValue
    rule_index: int
    action_index: int
    reads: list[str]


class SentMessage(StrictModel):
    channel: str
    payload: SignalValue
    rule_index: int
    action_index: int
    reads: list[str]


class FaultInfo(StrictModel):
    rule_index: int
    message: str


class ScanResult(StrictModel):
    plc_id: str
    tick: int
    inputs_snapshot: dict[str, SignalValue]
    outputs_written: list[WriteRecord] = Field(default_factory=list)
    messages_sent: list[SentMessage] = Field(default_factory=list)
    memory: dict[str, SignalValue] = Field(default_factory=dict)
    fault: Optional[FaultInfo] = None


class ProgramTypeError(StrictModel):
    plc_id: str
    rule_index: int
    location: str
    message: str

    def __str__(self) -> str:
        return f"program:{self.plc_id} {self.location}: {self.message}"


# ============================================================================
# Evaluation
# ============================================================================


class _Snapshot:
    """Start-of-scan view every expression of the cycle reads from."""

    def __init__(
        self,
        inputs: dict[str, Any],
        memory: dict[str, Any],
        inbox: Sequence[InboxMessage],
        tick: int,
    ) -> None:
        self.inputs = inputs
        self.memory = memory
        self.tick = tick
        self.latest: dict[str, Any] = {}
        for message in inbox:
            self.latest[message.channel] = message.payload

    def lookup(self, name: str) -> Any:
        if name in self.inputs:
            return self.inputs[name]
        if name in self.memory:
            return self.memory[name]
        raise ScanFault(f"unknown variable '{name}'")


def _numeric(value: Any, op: ExprOp) -> Any:
    if value_type(value) not in NUMERIC_TYPES:
        raise ScanFault(f"'{op.value}' needs numbers, got {value!r}")
    return value


def _boolean(value: Any, op: str) -> bool:
    if not isinstance(value, bool):
        raise ScanFault(f"'{op}' needs a bool, got {value!r}")
    return value


def evaluate(expr: Expr, snap: _Snapshot) -> Any:
    """Evaluate one expression. ``and``/``or`` short-circuit left to right."""
    op = expr.op
    if op == ExprOp.CONST:
        return expr.value
    if op == ExprOp.VAR:
        return snap.lookup(expr.name)
    if op == ExprOp.TICK:
        return snap.tick
    if op == ExprOp.RECEIVED:
        return expr.channel in snap.latest
    if op == ExprOp.PAYLOAD:
        if expr.channel not in snap.latest:
            raise ScanFault(f"no message on channel '{expr.channel}'")
        return snap.latest[expr.channel]
    if op == ExprOp.ELAPSED_SINCE:
        since = snap.lookup(expr.name)
        if isinstance(since, bool) or not isinstance(since, int):
            raise ScanFault(f"'elapsed_since' needs an int variable, got {since!r}")
        return snap.tick - since
    if op == ExprOp.NOT:
        return not _boolean(evaluate(expr.args[0], snap), "not")
    if op == ExprOp.AND:
        return all(_boolean(evaluate(arg, snap), "and") for arg in expr.args)
    if op == ExprOp.OR:
        return any(_boolean(evaluate(arg, snap), "or") for arg in expr.args)
    if op == ExprOp.IN:
        return compare_signal("in", evaluate(expr.args[0], snap), expr.values)
    if op in COMPARISONS:
        left, right = (evaluate(arg, snap) for arg in expr.args)
        try:
            return compare_signal(op.value, left, right)
        except TypeError as ex:
            raise ScanFault(str(ex)) from ex
    left = _numeric(evaluate(expr.args[0], snap), op)
    right = _numeric(evaluate(expr.args[1], snap), op)
    result = left + right if op == ExprOp.ADD else left - right
    if isinstance(result, int) and abs(result) > INT64_MAX:
        raise ScanFault(f"integer overflow in '{op.value}'")
    if isinstance(result, float) and not math.isfinite(result):
        raise ScanFault(f"non-finite result in '{op.value}'")
    return result


def read_tokens(expr: Expr, inputs: set[str], into: set[str]) -> set[str]:
    """
    Collect the read-set of an expression.

    Tokens are ``in:<var>`` for sensor inputs, ``mem:<var>`` for outputs and
    internal variables, and ``msg:<channel>`` for inbox reads.
    """
    if expr.op in (ExprOp.VAR, ExprOp.ELAPSED_SINCE):
        into.add(f"in:{expr.name}" if expr.name in inputs else f"mem:{expr.name}")
    elif expr.op in (ExprOp.RECEIVED, ExprOp.PAYLOAD):
        into.add(f"msg:{expr.channel}")
    for arg in expr.args:
        read_tokens(arg, inputs, into)
    return into


def rule_reads(rule: Rule, inputs: set[str]) -> list[str]:
    tokens: set[str] = set()
    read_tokens(rule.condition, inputs, tokens)
    for action in rule.actions:
        read_tokens(action.expr, inputs, tokens)
    return sorted(tokens)


def initial_memory(plc: PlcSpec) -> dict[str, SignalValue]:
    """Default values of every output and internal variable of a PLC."""
    return {var.name: var.default() for var in plc.variables if var.direction != Direction.IN}


def scan(
    program: PlcProgram,
    inputs: dict[str, Any],
    inbox: Sequence[InboxMessage],
    tick: int,
    memory: Optional[dict[str, Any]] = None,
) -> ScanResult:
    """
    Run one scan cycle.

    Conditions and right-hand sides all read the start-of-scan state. Writes
    become visible only in the returned memory; when two rules write the same
    variable the later one wins, and both writes are reported.

    A fault aborts the cycle: nothing is written or sent and memory is
    returned unchanged.

    Args:
        program: Rules of the PLC
        inputs: Sensor input values for this cycle
        inbox: Messages delivered this cycle, in delivery order
        tick: Current tick
        memory: Output and internal variable values before the scan

    Returns:
        ScanResult with writes and messages in (rule, action) order
    """
    before = dict(memory or {})
    snap = _Snapshot(dict(inputs), before, inbox, tick)
    input_names = set(inputs)
    writes: list[WriteRecord] = []
    sends: list[SentMessage] = []
    pending: dict[str, Any] = {}

    for rule_index, rule in enumerate(program.rules):
        try:
            fired = evaluate(rule.condition, snap)
            if not isinstance(fired, bool):
                raise ScanFault(f"condition evaluated to {fired!r}, not a bool")
            if not fired:
                continue
            reads = rule_reads(rule, input_names)
            for action_index, action in enumerate(rule.actions):
                value = evaluate(action.expr, snap)
                if action.kind == "assign":
                    pending[action.target] = value
                    writes.append(
                        WriteRecord(
                            variable=action.target,
                            value=value,
                            rule_index=rule_index,
                            action_index=action_index,
                            reads=reads,
                        )
                    )
                else:
                    sends.append(
                        SentMessage(
                            channel=action.channel,
                            payload=value,
                            rule_index=rule_index,
                            action_index=action_index,
                            reads=reads,
                        )
                    )
        except ScanFault as fault:
            logger.warning(
                "Scan fault",
                extra={"plc": program.plc_id, "tick": tick, "rule": rule_index, "fault": fault.message},
            )
            return ScanResult(
                plc_id=program.plc_id,
                tick=tick,
                inputs_snapshot=dict(inputs),
                memory=before,
                fault=FaultInfo(rule_index=rule_index, message=fault.message),
            )

    return ScanResult(
        plc_id=program.plc_id,
        tick=tick,
        inputs_snapshot=dict(inputs),
        outputs_written=writes,
        messages_sent=sends,
        memory={**before, **pending},
    )


# ============================================================================
# Static checking
# ============================================================================


class _TypeChecker:
    def __init__(self, program: PlcProgram, topology: Topology) -> None:
        self.program = program
        self.topology = topology
        self.plc = topology.plc_index.get(program.plc_id)
        self.errors: list[ProgramTypeError] = []
        self.rule_index = 0
        self.location = ""

    def fail(self, message: str) -> None:
        self.errors.append(
            ProgramTypeError(
                plc_id=self.program.plc_id,
                rule_index=self.rule_index,
                location=self.location,
                message=message,
            )
        )

    def inbound(self, channel: str) -> Optional[Any]:
        link = self.topology.link_index.get(channel)
        if link is None or link.dst != self.program.plc_id:
            self.fail(f"channel '{channel}' is not delivered to this PLC")
            return None
        return link

    def infer(self, expr: Expr) -> Optional[SignalType]:
        op = expr.op
        if op == ExprOp.CONST:
            return value_type(expr.value)
        if op in (ExprOp.VAR, ExprOp.ELAPSED_SINCE):
            var = self.plc.variable(expr.name)
            if var is None:
                self.fail(f"unknown variable '{expr.name}'")
                return None
            if op == ExprOp.ELAPSED_SINCE:
                if var.type != SignalType.INT:
                    self.fail(f"'elapsed_since' needs an int variable, '{expr.name}' is {var.type.value}")
                return SignalType.INT
            return var.type
        if op == ExprOp.TICK:
            return SignalType.INT
        if op == ExprOp.RECEIVED:
            self.inbound(expr.channel)
            return SignalType.BOOL
        if op == ExprOp.PAYLOAD:
            link = self.inbound(expr.channel)
            return link.payload if link else None
        kinds = [self.infer(arg) for arg in expr.args]
        if op in (ExprOp.NOT, ExprOp.AND, ExprOp.OR):
            for kind in kinds:
                if kind is not None and kind != SignalType.BOOL:
                    self.fail(f"'{op.value}' needs bool operands, got {kind.value}")
            return SignalType.BOOL
        if op == ExprOp.IN:
            for candidate in expr.values or []:
                if kinds[0] is not None and not value_matches(candidate, kinds[0]):
                    self.fail(f"'in' candidate {candidate!r} does not match {kinds[0].value}")
            self.check_enum_members(expr.args[0], expr.values or [])
            return SignalType.BOOL
        left, right = kinds
        if op in ORDERINGS or op in (ExprOp.ADD, ExprOp.SUB):
            for kind in kinds:
                if kind is not None and kind not in NUMERIC_TYPES:
                    self.fail(f"'{op.value}' needs numeric operands, got {kind.value}")
            if op in ORDERINGS:
                return SignalType.BOOL
            return SignalType.FLOAT if SignalType.FLOAT in kinds else SignalType.INT
        if left is not None and right is not None and not _compatible(left, right):
            self.fail(f"cannot compare {left.value} with {right.value}")
        for var_side, const_side in ((expr.args[0], expr.args[1]), (expr.args[1], expr.args[0])):
            if const_side.op == ExprOp.CONST:
                self.check_enum_members(var_side, [const_side.value])
        return SignalType.BOOL

    def check_enum_members(self, expr: Expr, candidates: list[Any]) -> None:
        if expr.op != ExprOp.VAR or self.plc is None:
            return
        var = self.plc.variable(expr.name)
        if var is None or var.type != SignalType.ENUM or not var.values:
            return
        for candidate in candidates:
            if isinstance(candidate, str) and candidate not in var.values:
                self.fail(f"'{candidate}' is not a value of '{expr.name}'")

    def check_action(self, action: Action) -> None:
        kind = self.infer(action.expr)
        if action.kind == "send":
            link = self.topology.link_index.get(action.channel)
            if link is None or link.src != self.program.plc_id:
                self.fail(f"channel '{action.channel}' is not sent by this PLC")
            elif kind is not None and not _compatible(link.payload, kind):
                self.fail(f"payload {kind.value} does not match channel type {link.payload.value}")
            return
        var = self.plc.variable(action.target)
        if var is None:
            self.fail(f"unknown variable '{action.target}'")
            return
        if var.direction == Direction.IN:
            self.fail(f"cannot assign input variable '{action.target}'")
        if kind is not None and not (
            kind == var.type or (var.type == SignalType.FLOAT and kind == SignalType.INT)
        ):
            self.fail(f"cannot assign {kind.value} to {var.type.value} variable '{action.target}'")
        if action.expr.op == ExprOp.CONST:
            value = action.expr.value
            if kind == var.type and not value_matches(value, var.type, var.values):
                self.fail(f"{value!r} is not a value of '{action.target}'")
            actuator = self.topology.actuator_by_variable.get((self.program.plc_id, action.target))
            if actuator is not None and not any(
                compare_signal("eq", value, c) for c in actuator.command_set
            ):
                self.fail(f"{value!r} is outside the command set of '{actuator.id}'")

    def run(self) -> list[ProgramTypeError]:
        if self.plc is None:
            self.location = "plc_id"
            self.fail(f"program for undeclared PLC '{self.program.plc_id}'")
            return self.errors
        for index, rule in enumerate(self.program.rules):
            self.rule_index = index
            self.location = f"rules[{index}].condition"
            kind = self.infer(rule.condition)
            if kind is not None and kind != SignalType.BOOL:
                self.fail(f"condition has type {kind.value}, not bool")
            for action_index, action in enumerate(rule.actions):
                self.location = f"rules[{index}].actions[{action_index}]"
                self.check_action(action)
        return self.errors


def _compatible(left: SignalType, right: SignalType) -> bool:
    return left == right or (left in NUMERIC_TYPES and right in NUMERIC_TYPES)


def typecheck_program(program: PlcProgram, topology: Topology) -> list[ProgramTypeError]:
    """
    Check a program against the topology it will run in.

    Returns:
        Errors in rule order; empty when the program is well-typed
    """
    return _TypeChecker(program, topology).run()
