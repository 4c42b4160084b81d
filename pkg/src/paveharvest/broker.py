"""TCP-served subject router: the central hub of the live pipeline.

Accepts client sessions speaking the ``wire`` grammar, maintains
subscriptions, and fans published messages out to every matching
subscriber. Delivery is at-most-once with no persistence; durability
belongs to the store, not the bus.

Per session there is one reader thread and one writer thread draining a
bounded outbound queue; a session that cannot keep up is dropped with
``-ERR slow consumer``. SUB/UNSUB are acknowledged with ``+OK`` so clients
can synchronize on subscription visibility.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from . import wire
from .wire import Frame, Subject

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_FRAMES = 8192
DEFAULT_PING_INTERVAL = 30.0


class SubjectRouter:
    """Routing table mapping (session, sid) subscriptions to patterns.

    Thread-safe; `route` holds the lock while collecting matches so that
    a subscription is either fully visible to a publish or not at all.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._subs: dict[int, dict[int, Subject]] = {}

    def register(self, session_id: int, sid: int, pattern: Subject) -> None:
        with self._lock:
            sids = self._subs.setdefault(session_id, {})
            if sid in sids:
                raise ValueError(f"duplicate sid {sid}")
            sids[sid] = pattern

    def unregister(self, session_id: int, sid: int) -> bool:
        with self._lock:
            sids = self._subs.get(session_id, {})
            return sids.pop(sid, None) is not None

    def drop_session(self, session_id: int) -> None:
        with self._lock:
            self._subs.pop(session_id, None)

    def route(self, subject: Subject) -> list[tuple[int, int]]:
        """All (session, sid) pairs whose pattern matches ``subject``."""
        with self._lock:
            return [
                (session_id, sid)
                for session_id, sids in self._subs.items()
                for sid, pattern in sids.items()
                if wire.subject_matches(pattern, subject)
            ]


@dataclass
class SessionStats:
    frames_in: int = 0
    frames_out: int = 0
    last_activity: float = field(default_factory=time.monotonic)


class _Session:
    def __init__(self, broker: "Broker", session_id: int, sock: socket.socket):
        self.broker = broker
        self.id = session_id
        self.sock = sock
        self.outbox: queue.Queue = queue.Queue(maxsize=broker.queue_frames)
        self.stats = SessionStats()
        self.alive = True
        self.ping_outstanding = 0
        self._close_lock = threading.Lock()
        self.reader = threading.Thread(
            target=self._read_loop, name=f"broker-r{session_id}", daemon=True
        )
        self.writer = threading.Thread(
            target=self._write_loop, name=f"broker-w{session_id}", daemon=True
        )

    def start(self) -> None:
        self.reader.start()
        self.writer.start()

    # -- outbound ------------------------------------------------------------

    def send(self, frame: Frame) -> None:
        """Queue a frame; drops the session on overflow (slow consumer)."""
        try:
            self.outbox.put_nowait(frame)
        except queue.Full:
            logger.warning("session %d: slow consumer, dropping", self.id)
            self._evict("slow consumer")

    def _evict(self, reason: str) -> None:
        # Clear backlog so the ERR gets through, then close.
        try:
            while True:
                self.outbox.get_nowait()
        except queue.Empty:
            pass
        try:
            self.outbox.put_nowait(Frame(wire.ERR, message=reason))
            self.outbox.put_nowait(None)
        except queue.Full:
            self.close()

    def _write_loop(self) -> None:
        try:
            while True:
                frame = self.outbox.get()
                if frame is None:
                    break
                self.sock.sendall(wire.encode_frame(frame))
                self.stats.frames_out += 1
        except OSError:
            pass
        finally:
            self.close()

    # -- inbound ---------------------------------------------------------------

    def _read_loop(self) -> None:
        # On protocol errors this returns WITHOUT closing: the writer flushes
        # the queued -ERR, hits the sentinel, and closes the session itself.
        buf = bytearray()
        while self.alive:
            try:
                chunk = self.sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            buf += chunk
            self.stats.last_activity = time.monotonic()
            self.ping_outstanding = 0
            while True:
                try:
                    got = wire.parse_frame(buf, self.broker.max_payload)
                except wire.MalformedFrame as exc:
                    self._protocol_error(str(exc))
                    return
                if got is None:
                    break
                frame, used = got
                del buf[:used]
                self.stats.frames_in += 1
                if not self._dispatch(frame):
                    return
        self.close()

    def _dispatch(self, frame: Frame) -> bool:
        k = frame.kind
        if k == wire.PUB:
            self.broker.route(frame.subject, frame.payload)
        elif k == wire.SUB:
            try:
                self.broker.router.register(self.id, frame.sid, frame.subject)
            except ValueError as exc:
                self._protocol_error(str(exc))
                return False
            self.send(Frame(wire.OK))
        elif k == wire.UNSUB:
            self.broker.router.unregister(self.id, frame.sid)  # idempotent
            self.send(Frame(wire.OK))
        elif k == wire.PING:
            self.send(Frame(wire.PONG))
        elif k == wire.PONG:
            pass  # activity already noted
        else:
            self._protocol_error(f"unexpected verb {k}")
            return False
        return True

    def _protocol_error(self, message: str) -> None:
        logger.info("session %d: protocol error: %s", self.id, message)
        self._evict(message)

    def close(self) -> None:
        with self._close_lock:
            if not self.alive:
                return
            self.alive = False
        self.broker._remove_session(self)
        try:
            self.outbox.put_nowait(None)
        except queue.Full:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Broker:
    """Runnable broker; ``start()`` binds and serves until ``stop()``."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        max_payload: int = wire.MAX_PAYLOAD,
        queue_frames: int = DEFAULT_QUEUE_FRAMES,
        ping_interval: float = DEFAULT_PING_INTERVAL,
    ):
        self.host = host
        self.port = port
        self.max_payload = max_payload
        self.queue_frames = queue_frames
        self.ping_interval = ping_interval
        self.router = SubjectRouter()
        self._sessions: dict[int, _Session] = {}
        self._lock = threading.Lock()
        self._next_id = 1
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._ticker_thread: threading.Thread | None = None
        self._stopping = threading.Event()

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Broker":
        if self._listener is not None:
            return self
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen(128)
        listener.settimeout(0.5)  # lets the accept loop notice stop()
        self.port = listener.getsockname()[1]
        self._listener = listener
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="broker-accept", daemon=True
        )
        self._accept_thread.start()
        self._ticker_thread = threading.Thread(
            target=self._keepalive_loop, name="broker-keepalive", daemon=True
        )
        self._ticker_thread.start()
        logger.info("broker listening on %s:%d", self.host, self.port)
        return self

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def __enter__(self) -> "Broker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- serving -------------------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                session_id = self._next_id
                self._next_id += 1
                session = _Session(self, session_id, sock)
                self._sessions[session_id] = session
            logger.debug("session %d connected from %s", session_id, addr)
            session.start()

    def _keepalive_loop(self) -> None:
        while not self._stopping.wait(self.ping_interval / 2):
            now = time.monotonic()
            with self._lock:
                sessions = list(self._sessions.values())
            for session in sessions:
                idle = now - session.stats.last_activity
                if idle > 2 * self.ping_interval:
                    logger.info("session %d: keepalive timeout", session.id)
                    session.close()
                elif idle > self.ping_interval and session.ping_outstanding < 2:
                    session.ping_outstanding += 1
                    session.send(Frame(wire.PING))

    def _remove_session(self, session: _Session) -> None:
        self.router.drop_session(session.id)
        with self._lock:
            self._sessions.pop(session.id, None)

    # -- routing ---------------------------------------------------------------

    def route(self, subject: Subject, payload: bytes) -> list[tuple[int, int]]:
        """Fan a publish out to all matching subscriptions.

        Returns the delivery set as (session, sid) pairs; delivery to a
        dead session is silently dropped (at-most-once).
        """
        deliveries = self.router.route(subject)
        if not deliveries:
            return deliveries
        with self._lock:
            targets = [
                (self._sessions.get(session_id), session_id, sid)
                for session_id, sid in deliveries
            ]
        for session, _session_id, sid in targets:
            if session is not None and session.alive:
                session.send(Frame(wire.MSG, subject=subject, sid=sid, payload=payload))
        return deliveries

    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)
