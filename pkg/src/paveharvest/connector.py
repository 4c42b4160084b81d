"""Bridge from the bus to the store: validate, transform, batch, count.

Subscribes with a wildcard on all sensor subjects, turns each payload
into a store record, and batch-inserts into the time-series store.
Delivery is at-most-once end to end: a record that fails validation or
storage is counted by reason and never retried; gaps are surfaced through
per-sensor sequence accounting instead.

Metrics are readable at any time as a consistent snapshot, and optionally
served as plaintext ``GET /metrics``.
"""

from __future__ import annotations

import collections
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import wire
from .client import BusClient, BusError
from .timeutil import now_us
from .tsstore import Sample, Store
from .wire import Subject

logger = logging.getLogger(__name__)

DEFAULT_WILDCARD = "site.>"
DEFAULT_BATCH_SIZE = 500
DEFAULT_BATCH_AGE_S = 0.2
DEFAULT_QUEUE_CAP = 10_000
BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 30.0

#: reject reasons
MALFORMED = "malformed"
NONFINITE = "nonfinite"
BAD_SUBJECT = "bad_subject"
OVERFLOW = "overflow"
STORE = "store"

#: latency histogram upper bounds, microseconds (last bucket is unbounded)
LATENCY_BOUNDS_US = (
    1_000, 5_000, 10_000, 25_000, 50_000, 100_000,
    250_000, 500_000, 1_000_000, 2_500_000, 5_000_000,
)


class Reject(Exception):
    """A message that cannot be ingested; ``reason`` names the counter."""

    reason = "unknown"


class RejectMalformed(Reject):
    reason = MALFORMED


class RejectNonFinite(Reject):
    reason = NONFINITE


class RejectBadSubject(Reject):
    reason = BAD_SUBJECT


@dataclass
class StoreRecord:
    """A validated sample bound for the store."""

    sensor_key: str
    ts: int
    v: float
    seq: int
    recv_wall_us: int


def sensor_key_for(subject: Subject) -> str:
    """Derive the stable store key from a sensor subject.

    ``site.<site>.daq.<daq>.sensor.<id>`` becomes ``<site>/<daq>/<id>``;
    anything shaped differently is rejected.
    """
    toks = subject.tokens
    if len(toks) != 6 or toks[0] != "site" or toks[2] != "daq" or toks[4] != "sensor":
        raise RejectBadSubject(f"unexpected subject shape: {subject}")
    return f"{toks[1]}/{toks[3]}/{toks[5]}"


def transform(subject: Subject, payload: bytes, recv_wall_us: int | None = None) -> StoreRecord:
    """Validate a delivered message and map it onto a store record."""
    key = sensor_key_for(subject)
    try:
        sample = wire.decode_sample(payload)
    except wire.PayloadError as exc:
        raise RejectMalformed(str(exc)) from exc
    if not math.isfinite(sample.v):
        raise RejectNonFinite(f"non-finite value for {key}")
    return StoreRecord(
        sensor_key=key,
        ts=sample.ts,
        v=sample.v,
        seq=sample.seq,
        recv_wall_us=recv_wall_us if recv_wall_us is not None else now_us(),
    )


@dataclass
class IngestMetrics:
    """Point-in-time ingest counters.

    ``received == accepted + sum(rejected.values()) + in_flight`` at every
    snapshot; once the queue has drained, received = accepted + rejected
    exactly.
    """

    received: int = 0
    accepted: int = 0
    rejected: dict[str, int] = field(default_factory=dict)
    in_flight: int = 0
    duplicate_seq: int = 0
    seq_gaps: int = 0
    skew_events: int = 0
    latency_bounds_us: tuple = LATENCY_BOUNDS_US
    latency_counts: list[int] = field(default_factory=list)
    rate_per_s: float = 0.0

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())

    def latency_percentile_us(self, q: float) -> int:
        """Conservative percentile from the histogram (bucket upper bound)."""
        total = sum(self.latency_counts)
        if total == 0:
            return 0
        rank = math.ceil(q * total)
        seen = 0
        for i, count in enumerate(self.latency_counts):
            seen += count
            if seen >= rank:
                if i < len(self.latency_bounds_us):
                    return self.latency_bounds_us[i]
                return self.latency_bounds_us[-1] * 2  # overflow bucket
        return self.latency_bounds_us[-1] * 2


def render_metrics_text(m: IngestMetrics) -> str:
    """Plaintext name/value lines for the /metrics endpoint."""
    lines = [
        f"received {m.received}",
        f"accepted {m.accepted}",
        f"in_flight {m.in_flight}",
    ]
    for reason in sorted(set(m.rejected) | {MALFORMED, NONFINITE, BAD_SUBJECT, OVERFLOW, STORE}):
        lines.append(f"rejected_{reason} {m.rejected.get(reason, 0)}")
    lines += [
        f"duplicate_seq {m.duplicate_seq}",
        f"seq_gaps {m.seq_gaps}",
        f"skew_events {m.skew_events}",
        f"rate_per_s {m.rate_per_s:.3f}",
    ]
    for bound, count in zip(m.latency_bounds_us, m.latency_counts):
        lines.append(f"latency_le_{bound}us {count}")
    if m.latency_counts:
        lines.append(f"latency_overflow {m.latency_counts[-1]}")
    return "\n".join(lines) + "\n"


class Connector:
    """Runnable transform connector.

    ``start()`` begins consuming from the broker (with reconnect and
    resubscribe on failure) and draining into the store. For replay-style
    use, ``ingest()`` can be called directly without a broker.
    """

    def __init__(
        self,
        store: Store,
        broker_addr: tuple[str, int] | None = None,
        wildcard: str = DEFAULT_WILDCARD,
        batch_size: int = DEFAULT_BATCH_SIZE,
        batch_age_s: float = DEFAULT_BATCH_AGE_S,
        queue_cap: int = DEFAULT_QUEUE_CAP,
        backoff_base_s: float = BACKOFF_BASE_S,
        backoff_cap_s: float = BACKOFF_CAP_S,
        metrics_port: int | None = None,
        on_insert=None,
    ):
        self.store = store
        self.broker_addr = broker_addr
        self.wildcard = wildcard
        self.batch_size = batch_size
        self.batch_age_s = batch_age_s
        self.backoff_base_s = backoff_base_s
        self.backoff_cap_s = backoff_cap_s
        self.on_insert = on_insert
        self._queue: queue.Queue = queue.Queue(maxsize=queue_cap)
        self._mlock = threading.Lock()
        self._received = 0
        self._accepted = 0
        self._rejected: collections.Counter = collections.Counter()
        self._duplicate_seq = 0
        self._seq_gaps = 0
        self._skew = 0
        self._last_seq: dict[str, int] = {}
        self._latency_counts = [0] * (len(LATENCY_BOUNDS_US) + 1)
        self._rate_counts: dict[int, int] = {}  # epoch second -> accepted
        self._stop = threading.Event()
        self._ready = threading.Event()
        self._writer: threading.Thread | None = None
        self._consumer: threading.Thread | None = None
        self._client: BusClient | None = None
        self._http: ThreadingHTTPServer | None = None
        self.metrics_port: int | None = None
        if metrics_port is not None:
            self._start_http(metrics_port)

    # -- ingest path -------------------------------------------------------

    def ingest(self, subject: Subject, payload: bytes, recv_wall_us: int | None = None) -> None:
        """Count one delivered message and queue it for storage."""
        with self._mlock:
            self._received += 1
        try:
            record = transform(subject, payload, recv_wall_us)
        except Reject as exc:
            self._reject(exc.reason)
            return
        self._track_seq(record)
        try:
            self._queue.put_nowait(record)
        except queue.Full:
            self._reject(OVERFLOW)

    def _reject(self, reason: str) -> None:
        with self._mlock:
            self._rejected[reason] += 1

    def _track_seq(self, record: StoreRecord) -> None:
        with self._mlock:
            last = self._last_seq.get(record.sensor_key)
            if last is not None:
                if record.seq <= last:
                    self._duplicate_seq += 1
                elif record.seq > last + 1:
                    self._seq_gaps += record.seq - last - 1
            if last is None or record.seq > last:
                self._last_seq[record.sensor_key] = record.seq

    def _write_loop(self) -> None:
        while True:
            batch = self._next_batch()
            if batch is None:
                return
            if batch:
                self._insert(batch)

    def _next_batch(self) -> list[StoreRecord] | None:
        """Block for the first record, then fill until size or age limit."""
        try:
            first = self._queue.get(timeout=0.1)
        except queue.Empty:
            return [] if not self._stop.is_set() else None
        if first is None:
            return None
        batch = [first]
        deadline = time.monotonic() + self.batch_age_s
        while len(batch) < self.batch_size:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                item = self._queue.get(timeout=remaining)
            except queue.Empty:
                break
            if item is None:
                self._queue.put(None)  # keep the sentinel for the outer loop
                break
            batch.append(item)
        return batch

    def _insert(self, batch: list[StoreRecord]) -> None:
        samples = [Sample(r.sensor_key, r.ts, r.v) for r in batch]
        try:
            report = self.store.insert(samples)
            statuses = report.statuses
        except Exception as exc:  # storage failure: count, do not retry
            logger.error("store insert failed: %s", exc)
            statuses = [STORE] * len(batch)
        wall = now_us()
        second = wall // 1_000_000
        with self._mlock:
            for record, status in zip(batch, statuses):
                if status in ("ack", "duplicate"):
                    self._accepted += 1
                    self._rate_counts[second] = self._rate_counts.get(second, 0) + 1
                    self._observe_latency(wall - record.ts)
                else:
                    self._rejected[STORE] += 1
            if len(self._rate_counts) > 64:
                for s in sorted(self._rate_counts)[:-16]:
                    del self._rate_counts[s]
        if self.on_insert is not None:
            for record, status in zip(batch, statuses):
                if status in ("ack", "duplicate"):
                    self.on_insert(record, wall)

    def _observe_latency(self, delta_us: int) -> None:
        if delta_us < 0:
            self._skew += 1
            delta_us = 0
        for i, bound in enumerate(LATENCY_BOUNDS_US):
            if delta_us <= bound:
                self._latency_counts[i] += 1
                return
        self._latency_counts[-1] += 1

    # -- metrics ------------------------------------------------------------

    def metrics_snapshot(self) -> IngestMetrics:
        with self._mlock:
            second = now_us() // 1_000_000
            recent = sum(
                count
                for s, count in self._rate_counts.items()
                if second - 10 < s <= second
            )
            return IngestMetrics(
                received=self._received,
                accepted=self._accepted,
                rejected=dict(self._rejected),
                in_flight=self._queue.qsize(),
                duplicate_seq=self._duplicate_seq,
                seq_gaps=self._seq_gaps,
                skew_events=self._skew,
                latency_counts=list(self._latency_counts),
                rate_per_s=recent / 10.0,
            )

    def wait_ready(self, timeout: float = 10.0) -> bool:
        """Block until the wildcard subscription is live."""
        return self._ready.wait(timeout)

    def drain(self, timeout: float = 30.0) -> bool:
        """Wait until everything received has been stored or rejected."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            m = self.metrics_snapshot()
            if m.in_flight == 0 and m.received == m.accepted + m.rejected_total:
                return True
            time.sleep(0.02)
        return False

    # -- consumer ------------------------------------------------------------

    def start(self) -> "Connector":
        self._writer = threading.Thread(
            target=self._write_loop, name="connector-writer", daemon=True
        )
        self._writer.start()
        if self.broker_addr is not None:
            self._consumer = threading.Thread(
                target=self._consume_loop, name="connector-consumer", daemon=True
            )
            self._consumer.start()
        return self

    def _consume_loop(self) -> None:
        backoff = self.backoff_base_s
        while not self._stop.is_set():
            disconnected = threading.Event()
            try:
                client = BusClient(
                    *self.broker_addr, on_disconnect=disconnected.set
                )
                self._client = client
                client.subscribe(
                    self.wildcard,
                    lambda s, p, _sid: self.ingest(s, p, now_us()),
                )
            except (OSError, BusError) as exc:
                logger.warning(
                    "broker connect failed (%s); retrying in %.1fs", exc, backoff
                )
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2, self.backoff_cap_s)
                continue
            logger.info("subscribed to %s", self.wildcard)
            backoff = self.backoff_base_s
            self._ready.set()
            while not disconnected.is_set() and not self._stop.is_set():
                disconnected.wait(0.2)
            self._ready.clear()
            client.close()
            if not self._stop.is_set():
                logger.warning("broker connection lost; reconnecting")
                if self._stop.wait(self.backoff_base_s):
                    return

    def stop(self) -> None:
        self._stop.set()
        if self._client is not None:
            self._client.close()
        if self._consumer is not None:
            self._consumer.join(timeout=5)
        self._queue.put(None)
        if self._writer is not None:
            self._writer.join(timeout=10)
        if self._http is not None:
            self._http.shutdown()
            self._http = None

    def __enter__(self) -> "Connector":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- http ------------------------------------------------------------

    def _start_http(self, port: int) -> None:
        connector = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):  # noqa: N802 (stdlib naming)
                if self.path != "/metrics":
                    self.send_error(404)
                    return
                body = render_metrics_text(connector.metrics_snapshot()).encode()
                self.send_response(200)
                self.send_header("Content-Type", "text/plain; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._http = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self.metrics_port = self._http.server_address[1]
        threading.Thread(
            target=self._http.serve_forever, name="connector-metrics", daemon=True
        ).start()
