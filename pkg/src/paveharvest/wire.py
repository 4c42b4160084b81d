"""Byte-level pub/sub protocol: subjects, frames and sample payloads.

Text-line frames, CRLF-terminated, with an explicit payload byte length:

    PUB <subject> <len>\\r\\n<len bytes>\\r\\n
    SUB <subject> <sid>\\r\\n
    UNSUB <sid>\\r\\n
    MSG <subject> <sid> <len>\\r\\n<len bytes>\\r\\n
    PING\\r\\n / PONG\\r\\n / +OK\\r\\n / -ERR <text>\\r\\n

Subjects are dot-separated token paths. In patterns, ``*`` matches exactly
one token and a trailing ``>`` matches one or more remaining tokens.
Everything here is pure functions over byte buffers; no shared state.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

MAX_PAYLOAD = 1 << 20  # default cap, configurable per call
MAX_CONTROL_LINE = 4096

CRLF = b"\r\n"

_TOKEN_RE = re.compile(r"^[A-Za-z0-9_-]+$")
_TOPIC_LEVEL_RE = re.compile(r"^[A-Za-z0-9_-]+$")

#: Frame kinds, matching the wire verbs.
PUB = "PUB"
SUB = "SUB"
UNSUB = "UNSUB"
MSG = "MSG"
PING = "PING"
PONG = "PONG"
OK = "OK"
ERR = "ERR"

FRAME_KINDS = frozenset({PUB, SUB, UNSUB, MSG, PING, PONG, OK, ERR})


class WireError(Exception):
    """Base for protocol-level failures."""


class MalformedFrame(WireError):
    """Unknown verb, bad length field, or an illegal subject for the verb."""


class PayloadTooLarge(MalformedFrame):
    """Declared payload length exceeds the configured maximum."""


class InvalidSubject(WireError):
    """Subject text violates the token grammar or wildcard placement."""


class InvalidTopic(WireError):
    """MQTT topic cannot be mapped onto a subject."""


class PayloadError(WireError):
    """Sample payload JSON does not obey the schema."""


@dataclass(frozen=True)
class Subject:
    """Hierarchical routing address: an ordered tuple of tokens.

    A concrete subject uses only charset tokens (``A-Z a-z 0-9 _ -``).
    Pattern subjects may additionally use ``*`` for any single token and,
    as the final token only, ``>`` for the remaining tail.
    """

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise InvalidSubject("subject needs at least one token")
        last = len(self.tokens) - 1
        for i, tok in enumerate(self.tokens):
            if tok == "*":
                continue
            if tok == ">":
                if i != last:
                    raise InvalidSubject("'>' is only legal as the last token")
                continue
            if not _TOKEN_RE.match(tok):
                raise InvalidSubject(f"bad subject token: {tok!r}")

    @classmethod
    def parse(cls, text: str) -> "Subject":
        return cls(tuple(text.split(".")))

    @property
    def is_pattern(self) -> bool:
        return any(tok in ("*", ">") for tok in self.tokens)

    def __str__(self) -> str:
        return ".".join(self.tokens)


def subject_matches(pattern: Subject, subject: Subject) -> bool:
    """True iff ``subject`` (concrete) is matched by ``pattern``.

    Tokens align left to right; ``*`` consumes exactly one token and a
    trailing ``>`` consumes one or more remaining tokens.
    """
    pt, st = pattern.tokens, subject.tokens
    for i, tok in enumerate(pt):
        if tok == ">":
            return len(st) > i  # at least one token left
        if i >= len(st):
            return False
        if tok == "*":
            continue
        if tok != st[i]:
            return False
    return len(pt) == len(st)


def mqtt_topic_to_subject(topic: str) -> Subject:
    """Map an MQTT topic onto a subject: slash to dot, ``+`` to ``*``, final ``#`` to ``>``."""
    levels = topic.split("/")
    tokens: list[str] = []
    last = len(levels) - 1
    for i, level in enumerate(levels):
        if level == "+":
            tokens.append("*")
        elif level == "#":
            if i != last:
                raise InvalidTopic(f"'#' must be the final level: {topic!r}")
            tokens.append(">")
        elif _TOPIC_LEVEL_RE.match(level):
            tokens.append(level)
        else:
            raise InvalidTopic(f"bad topic level {level!r} in {topic!r}")
    return Subject(tuple(tokens))


def subject_to_mqtt_topic(subject: Subject) -> str:
    """Inverse of :func:`mqtt_topic_to_subject` (the mapping is injective)."""
    levels = []
    for tok in subject.tokens:
        if tok == "*":
            levels.append("+")
        elif tok == ">":
            levels.append("#")
        else:
            levels.append(tok)
    return "/".join(levels)


@dataclass
class Frame:
    """One wire-protocol unit.

    Field usage per kind: ``subject`` on PUB/SUB/MSG, ``sid`` on
    SUB/UNSUB/MSG, ``payload`` on PUB/MSG, ``message`` on ERR.
    """

    kind: str
    subject: Subject | None = None
    sid: int | None = None
    payload: bytes = b""
    message: str = ""


def encode_frame(frame: Frame) -> bytes:
    """Serialize a frame; assumes the frame invariants hold."""
    k = frame.kind
    if k == PING:
        return b"PING\r\n"
    if k == PONG:
        return b"PONG\r\n"
    if k == OK:
        return b"+OK\r\n"
    if k == ERR:
        return b"-ERR " + frame.message.encode() + CRLF
    if k == PUB:
        head = f"PUB {frame.subject} {len(frame.payload)}".encode()
        return head + CRLF + frame.payload + CRLF
    if k == SUB:
        return f"SUB {frame.subject} {frame.sid}".encode() + CRLF
    if k == UNSUB:
        return f"UNSUB {frame.sid}".encode() + CRLF
    if k == MSG:
        head = f"MSG {frame.subject} {frame.sid} {len(frame.payload)}".encode()
        return head + CRLF + frame.payload + CRLF
    raise ValueError(f"unknown frame kind: {k!r}")


def _parse_int(token: bytes, what: str) -> int:
    if not token.isdigit():
        raise MalformedFrame(f"bad {what}: {token!r}")
    return int(token)


def _parse_subject(token: bytes, *, concrete: bool) -> Subject:
    try:
        subject = Subject.parse(token.decode("ascii"))
    except (InvalidSubject, UnicodeDecodeError) as exc:
        raise MalformedFrame(f"bad subject: {token!r}") from exc
    if concrete and subject.is_pattern:
        raise MalformedFrame(f"wildcard forbidden here: {subject}")
    return subject


def parse_frame(
    buf: bytes | bytearray | memoryview, max_payload: int = MAX_PAYLOAD
) -> tuple[Frame, int] | None:
    """Parse the first complete frame from ``buf``.

    Returns ``(frame, consumed_bytes)`` or ``None`` when more bytes are
    needed. The buffer must start at a frame boundary. Raises
    :class:`MalformedFrame` (or :class:`PayloadTooLarge`) on garbage.
    """
    data = bytes(buf)
    eol = data.find(CRLF)
    if eol < 0:
        if len(data) > MAX_CONTROL_LINE:
            raise MalformedFrame("control line too long")
        return None
    line = data[:eol]
    consumed = eol + 2

    if line == b"PING":
        return Frame(PING), consumed
    if line == b"PONG":
        return Frame(PONG), consumed
    if line == b"+OK":
        return Frame(OK), consumed
    if line == b"-ERR" or line.startswith(b"-ERR "):
        text = line[5:].decode("utf-8", "replace")
        return Frame(ERR, message=text), consumed

    parts = line.split()
    if not parts:
        raise MalformedFrame("empty control line")
    verb = parts[0]

    if verb in (b"PUB", b"MSG"):
        want = 3 if verb == b"PUB" else 4
        if len(parts) != want:
            raise MalformedFrame(f"{verb.decode()} expects {want - 1} arguments")
        subject = _parse_subject(parts[1], concrete=True)
        sid = _parse_int(parts[2], "sid") if verb == b"MSG" else None
        length = _parse_int(parts[-1], "payload length")
        if length > max_payload:
            raise PayloadTooLarge(f"payload of {length} bytes exceeds {max_payload}")
        end = consumed + length + 2
        if len(data) < end:
            return None
        payload = data[consumed : consumed + length]
        if data[consumed + length : end] != CRLF:
            raise MalformedFrame("payload not CRLF-terminated")
        kind = PUB if verb == b"PUB" else MSG
        return Frame(kind, subject=subject, sid=sid, payload=payload), end

    if verb == b"SUB":
        if len(parts) != 3:
            raise MalformedFrame("SUB expects 2 arguments")
        subject = _parse_subject(parts[1], concrete=False)
        return Frame(SUB, subject=subject, sid=_parse_int(parts[2], "sid")), consumed

    if verb == b"UNSUB":
        if len(parts) != 2:
            raise MalformedFrame("UNSUB expects 1 argument")
        return Frame(UNSUB, sid=_parse_int(parts[1], "sid")), consumed

    raise MalformedFrame(f"unknown verb: {verb!r}")


@dataclass
class SamplePayload:
    """One averaged sensor reading as carried on the bus.

    ``ts`` is the event timestamp in integer microseconds UTC; ``v`` the
    measured value in the sensor's engineering unit; ``seq`` a per-sensor
    monotone sequence number.
    """

    ts: int
    v: float
    seq: int
    unit: str

    def encode(self) -> bytes:
        return json.dumps(
            {"ts": self.ts, "v": self.v, "seq": self.seq, "unit": self.unit},
            separators=(",", ":"),
        ).encode()


_SAMPLE_FIELDS = {"ts", "v", "seq", "unit"}


def decode_sample(payload: bytes) -> SamplePayload:
    """Strictly decode a sample payload.

    Exactly the fields ts/v/seq/unit are allowed; wrong types, extra or
    missing fields, non-positive ts or negative seq raise
    :class:`PayloadError`. A non-finite ``v`` decodes successfully so the
    caller can classify it separately.
    """
    try:
        obj = json.loads(payload)
    except (ValueError, UnicodeDecodeError) as exc:
        raise PayloadError(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != _SAMPLE_FIELDS:
        raise PayloadError("payload must have exactly the fields ts, v, seq, unit")
    ts, v, seq, unit = obj["ts"], obj["v"], obj["seq"], obj["unit"]
    if isinstance(ts, bool) or not isinstance(ts, int) or ts <= 0:
        raise PayloadError(f"ts must be a positive integer, got {ts!r}")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise PayloadError(f"v must be a number, got {v!r}")
    if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
        raise PayloadError(f"seq must be a nonnegative integer, got {seq!r}")
    if not isinstance(unit, str):
        raise PayloadError(f"unit must be a string, got {unit!r}")
    return SamplePayload(ts=ts, v=float(v), seq=seq, unit=unit)


def is_finite(v: float) -> bool:
    return math.isfinite(v)
