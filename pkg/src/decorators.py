"""Decorators for CLI commands.

Every command handler returns an exit code. The decorator turns structured
application errors into exit code 2 with a one-line stderr message, so each
handler only deals with its happy path.
"""

import sys
from functools import wraps
from typing import Any, Callable

from aws_lambda_powertools import Logger
from pydantic import ValidationError as PydanticValidationError

from exceptions import AppException, describe_error, format_error  # type: ignore
from helper import SERVICE_NAME  # type: ignore

logger = Logger(service=SERVICE_NAME, child=True)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_ERROR = 2


def exit_code_contract(func: Callable[..., int]) -> Callable[..., int]:
    """
    Map exceptions raised by a command handler to the CLI exit code contract.

    0 means success, 1 means the command completed and found violations,
    2 means the inputs were rejected.

    Usage:
        @exit_code_contract
        def cmd_check(config: CliConfig) -> int:
            ...
            return EXIT_FINDINGS if report.violations else EXIT_OK
    """

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> int:
        try:
            return func(*args, **kwargs)
        except AppException as ex:
            logger.warning("Command rejected", extra={"error": format_error(ex)})
            print(describe_error(ex), file=sys.stderr)
            return ex.exit_code
        except PydanticValidationError as ex:
            logger.warning("Document failed schema validation", extra={"errors": ex.error_count()})
            first = ex.errors()[0]
            location = ".".join(str(part) for part in first["loc"])
            print(f"ValidationError: {first['msg']} at {location}", file=sys.stderr)
            return EXIT_ERROR
        except OSError as ex:
            logger.warning("I/O failure", extra={"error": str(ex)})
            print(f"IOError: {ex}", file=sys.stderr)
            return EXIT_ERROR

    return wrapper
