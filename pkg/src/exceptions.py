"""Custom exceptions for structured error reporting.

Usage:
    raise NotFoundError("Command not found", resource_type="Command", resource_id="c-1a2b")
    raise ValidationError("Window must be non-empty", details={"t0": 5, "t1": 5})

Every CLI command maps an AppException to exit code 2 via
``decorators.exit_code_contract``.
"""

from typing import Any

# ============================================================================
# Exception Classes
# ============================================================================


class AppException(Exception):
    """Base exception for all application errors with structured details."""

    def __init__(self, message: str, exit_code: int = 2, details: dict | None = None) -> None:
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)


class ValidationError(AppException):
    """Invalid argument or violated precondition."""

    def __init__(self, message: str, details: dict | None = None) -> None:
        super().__init__(message, details=details)


class NotFoundError(AppException):
    """Unknown node, actuator, scenario or violation."""

    def __init__(
        self, message: str, resource_type: str | None = None, resource_id: str | None = None
    ) -> None:
        details = {}
        if resource_type:
            details["resource_type"] = resource_type
        if resource_id:
            details["resource_id"] = resource_id
        super().__init__(message, details=details)


class ConfigurationError(AppException):
    """Topology, program, attack or scenario failed validation."""

    def __init__(self, message: str, issues: list[Any] | None = None) -> None:
        rendered = [str(issue) for issue in issues or []]
        super().__init__(message, details={"issues": rendered})
        self.issues = list(issues or [])


class BoundsError(AppException):
    """Arithmetic result outside the supported range."""

    def __init__(self, message: str, details: dict | None = None) -> None:
        super().__init__(message, details=details)


class ScanFault(AppException):
    """A rule failed while a PLC scan was evaluating it."""

    def __init__(self, message: str, rule_index: int | None = None) -> None:
        super().__init__(message, details={"rule_index": rule_index})
        self.rule_index = rule_index


class TraceFormatError(AppException):
    """Malformed, unsupported or out-of-order trace content."""

    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(message, details={"line": line})
        self.line = line


class PolicyParseError(AppException):
    """Policy document rejected by the strict parser."""

    def __init__(self, message: str, location: str = "") -> None:
        super().__init__(message, details={"location": location})
        self.location = location


class PolicyEvaluationError(AppException):
    """Policy references something the graph does not know about."""

    def __init__(self, message: str, policy_id: str | None = None) -> None:
        super().__init__(message, details={"policy_id": policy_id})
        self.policy_id = policy_id


# ============================================================================
# Formatting
# ============================================================================


def format_error(ex: AppException) -> dict:
    """
    Format an AppException into the error envelope printed by the CLI.

    This is the single source of truth for exception formatting.

    Args:
        ex: The AppException to format

    Returns:
        dict: {"type", "message", "details"}
    """
    return {"type": ex.__class__.__name__, "message": ex.message, "details": ex.details}


def describe_error(ex: AppException) -> str:
    """One-line rendering of ``format_error`` for stderr."""
    text = f"{ex.__class__.__name__}: {ex.message}"
    line = ex.details.get("line")
    if line is not None:
        text += f" (line {line})"
    location = ex.details.get("location")
    if location:
        text += f" at {location}"
    for issue in ex.details.get("issues", []):
        text += f"\n  - {issue}"
    return text
