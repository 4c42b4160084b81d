"""Minimal TCP client for the subject bus.

One reader thread per connection dispatches MSG frames to per-sid
callbacks, answers server PINGs, and wakes subscribers waiting on +OK.
Callbacks run on the reader thread; keep them short or hand off to a
queue.
"""

from __future__ import annotations

import logging
import socket
import threading
from typing import Callable

from . import wire
from .wire import Frame, Subject

logger = logging.getLogger(__name__)

MessageHandler = Callable[[Subject, bytes, int], None]


class BusError(Exception):
    """Connection-level or broker-reported failure."""


class BusClient:
    """Blocking pub/sub client over the wire grammar."""

    def __init__(
        self,
        host: str,
        port: int,
        max_payload: int = wire.MAX_PAYLOAD,
        on_disconnect: Callable[[], None] | None = None,
        connect_timeout: float = 5.0,
    ):
        self.max_payload = max_payload
        self.on_disconnect = on_disconnect
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self._handlers: dict[int, MessageHandler] = {}
        self._next_sid = 1
        self._acks = threading.Semaphore(0)
        self._closed = threading.Event()
        self._last_error: str | None = None
        self._reader = threading.Thread(
            target=self._read_loop, name="bus-reader", daemon=True
        )
        self._reader.start()

    # -- sending ---------------------------------------------------------------

    def _send(self, frame: Frame) -> None:
        data = wire.encode_frame(frame)
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            raise BusError(f"connection lost: {exc}") from exc

    def publish(self, subject: Subject | str, payload: bytes) -> None:
        if isinstance(subject, str):
            subject = Subject.parse(subject)
        self._send(Frame(wire.PUB, subject=subject, payload=payload))

    def subscribe(
        self,
        pattern: Subject | str,
        handler: MessageHandler,
        ack_timeout: float = 5.0,
    ) -> int:
        """Register ``handler`` for ``pattern``; blocks until the broker acks."""
        if isinstance(pattern, str):
            pattern = Subject.parse(pattern)
        sid = self._next_sid
        self._next_sid += 1
        self._handlers[sid] = handler
        self._send(Frame(wire.SUB, subject=pattern, sid=sid))
        if not self._acks.acquire(timeout=ack_timeout):
            raise BusError(self._last_error or "no ack for SUB")
        if self._last_error is not None:
            raise BusError(self._last_error)
        return sid

    def unsubscribe(self, sid: int, ack_timeout: float = 5.0) -> None:
        self._handlers.pop(sid, None)
        self._send(Frame(wire.UNSUB, sid=sid))
        self._acks.acquire(timeout=ack_timeout)

    def ping(self) -> None:
        self._send(Frame(wire.PING))

    # -- receiving -------------------------------------------------------------

    def _read_loop(self) -> None:
        buf = bytearray()
        try:
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while True:
                    got = wire.parse_frame(buf, self.max_payload)
                    if got is None:
                        break
                    frame, used = got
                    del buf[:used]
                    self._handle(frame)
        except (OSError, wire.MalformedFrame) as exc:
            if not self._closed.is_set():
                logger.debug("bus reader stopped: %s", exc)
        finally:
            was_closed = self._closed.is_set()
            self.close()
            if not was_closed and self.on_disconnect is not None:
                self.on_disconnect()

    def _handle(self, frame: Frame) -> None:
        k = frame.kind
        if k == wire.MSG:
            handler = self._handlers.get(frame.sid)
            if handler is not None:
                handler(frame.subject, frame.payload, frame.sid)
        elif k == wire.PING:
            self._send(Frame(wire.PONG))
        elif k == wire.OK:
            self._acks.release()
        elif k == wire.ERR:
            self._last_error = frame.message
            logger.warning("broker error: %s", frame.message)
            self._acks.release()

    # -- lifecycle ---------------------------------------------------------------

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self) -> "BusClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
