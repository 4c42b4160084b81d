"""Timestamp and duration helpers shared by the store, connector and CLI.

All timestamps in the toolkit are integer microseconds since the Unix
epoch, UTC.
"""

from __future__ import annotations

import re
from datetime import datetime, timezone

US_PER_SECOND = 1_000_000

_DURATION_RE = re.compile(r"^(\d+)(us|ms|s|m|h|d)$")

_DURATION_US = {
    "us": 1,
    "ms": 1_000,
    "s": US_PER_SECOND,
    "m": 60 * US_PER_SECOND,
    "h": 3_600 * US_PER_SECOND,
    "d": 86_400 * US_PER_SECOND,
}


def parse_rfc3339(text: str) -> int:
    """Parse an RFC 3339 timestamp into microseconds since the epoch (UTC).

    Accepts a trailing ``Z`` or an explicit numeric offset; naive
    timestamps are rejected.
    """
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError as exc:
        raise ValueError(f"not an RFC 3339 timestamp: {text!r}") from exc
    if dt.tzinfo is None:
        raise ValueError(f"timestamp must carry a UTC offset: {text!r}")
    return int(round(dt.timestamp() * US_PER_SECOND))


def format_rfc3339(ts_us: int) -> str:
    """Render microseconds-since-epoch as RFC 3339 UTC.

    Sub-second digits are emitted only when nonzero, so whole seconds stay
    compact (``2020-11-23T10:30:00Z``).
    """
    seconds, micros = divmod(int(ts_us), US_PER_SECOND)
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc)
    base = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if micros:
        return f"{base}.{micros:06d}Z"
    return base + "Z"


def parse_duration(text: str) -> int:
    """Parse ``<n><unit>`` (us, ms, s, m, h, d) into microseconds."""
    m = _DURATION_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a duration (expect e.g. 30s, 5m, 1h): {text!r}")
    return int(m.group(1)) * _DURATION_US[m.group(2)]


def now_us() -> int:
    """Current wall clock in microseconds since the epoch."""
    import time

    return time.time_ns() // 1_000
