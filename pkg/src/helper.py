"""Helper module with hashing, canonical JSON and logging settings.

Everything that has to be bit-exact across runs and platforms goes through
``canonical_json`` so traces, graphs and reports serialize identically for
identical inputs.
"""

import hashlib
import json
import os
from typing import Any

SERVICE_NAME = "plcprov"

LOG_LEVELS = {"error": "ERROR", "warning": "WARNING", "info": "INFO", "debug": "DEBUG"}


# ============================================================================
# Serialization
# ============================================================================


def canonical_json(obj: Any, indent: int | None = None) -> str:
    """
    Serialize ``obj`` deterministically.

    Keys are sorted, separators fixed and NaN/infinity rejected.

    Args:
        obj: JSON-compatible value
        indent: Optional pretty-print indent

    Returns:
        The JSON text
    """
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(
        obj, sort_keys=True, separators=separators, indent=indent, ensure_ascii=True, allow_nan=False
    )


def content_hash(*parts: Any, size: int = 8) -> str:
    """Stable hex digest of the canonical JSON of ``parts``."""
    digest = hashlib.blake2b(canonical_json(list(parts)).encode("ascii"), digest_size=size)
    return digest.hexdigest()


def stream_key(name: str) -> int:
    """Map an identifier to a 64-bit integer used to key a random stream."""
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")


def value_repr(value: Any) -> str:
    """Render a signal value the way it appears in JSON."""
    return canonical_json(value)


# ============================================================================
# Logging settings
# ============================================================================


def log_level_from_env(default: str = "info") -> str:
    """
    Resolve the log level from ``PLCPROV_LOG``.

    Args:
        default: Level used when the variable is unset or unknown

    Returns:
        A level name understood by the logging module
    """
    raw = os.getenv("PLCPROV_LOG", default).strip().lower()
    return LOG_LEVELS.get(raw, LOG_LEVELS[default])
