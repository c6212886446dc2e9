"""Event batching, priority dispatch and framed publish transport.

Routine events are held and flushed as one framed message per interval;
critical events skip the batch and go out on the next dispatch cycle. The
wire format is a 4-byte big-endian length followed by a UTF-8 JSON body
``{"topic": ..., "events": [...]}``; the mock broker answers each frame
with a framed ``{"ack": n}``.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import ssl
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .errors import (BufferFullCritical, ConfigError, ConnectError, SinkUnavailable,
                     TlsConfigError)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HEADER = struct.Struct("!I")
MAX_FRAME = 64 * 1024 * 1024

PAYLOAD_KEYS = {
    "state_transition": frozenset({"label", "previous_label", "confidence", "track"}),
    "counter_snapshot": frozenset({"cumulative_ms", "track"}),
    "alert": frozenset({"label", "episode_start_ms", "raised_at_ms", "sustain_ms", "track"}),
    "heartbeat": frozenset({"pending"}),
}


def rfc3339_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


@dataclass(frozen=True)
class TelemetryEvent:
    kind: str
    priority: str
    t_ms: float
    payload: dict
    device_id: str
    wall_time: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in PAYLOAD_KEYS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.priority not in ("routine", "critical"):
            raise ValueError(f"unknown priority {self.priority!r}")
        if self.kind == "alert" and self.priority != "critical":
            raise ValueError("alerts are always critical")
        if set(self.payload) != PAYLOAD_KEYS[self.kind]:
            raise ValueError(f"{self.kind} payload keys must be {sorted(PAYLOAD_KEYS[self.kind])}")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {self.schema_version}")

    @property
    def idempotency_key(self) -> tuple:
        return (self.device_id, self.t_ms, self.kind)

    def as_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "priority": self.priority,
            "t_ms": self.t_ms,
            "wall_time": self.wall_time,
            "device_id": self.device_id,
            "payload": self.payload,
        }


def make_event(kind: str, t_ms: float, payload: dict, device_id: str,
               priority: Optional[str] = None) -> TelemetryEvent:
    prio = priority or ("critical" if kind == "alert" else "routine")
    return TelemetryEvent(kind, prio, float(t_ms), payload, device_id, rfc3339_now())


def topic_for(device_id: str, kind: str) -> str:
    return f"nicu/{device_id}/{kind}"


# --- framing ---------------------------------------------------------------

def encode_body(topic: str, events) -> bytes:
    evs = [e.as_dict() if isinstance(e, TelemetryEvent) else e for e in events]
    return json.dumps({"topic": topic, "events": evs}, separators=(",", ":")).encode("utf-8")


def encode_frame(body: bytes) -> bytes:
    return HEADER.pack(len(body)) + body


def _recv_exact(sock, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> Optional[bytes]:
    """Read one length-prefixed body; None on clean EOF."""
    hdr = _recv_exact(sock, HEADER.size)
    if hdr is None:
        return None
    (n,) = HEADER.unpack(hdr)
    if n > MAX_FRAME:
        raise ValueError(f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n)
    if body is None:
        raise ConnectionError("connection closed mid-frame")
    return body


# --- TLS -------------------------------------------------------------------

_TLS_VERSIONS = {"1.2": ssl.TLSVersion.TLSv1_2, "1.3": ssl.TLSVersion.TLSv1_3}


@dataclass
class TlsConfig:
    min_version: str = "1.2"
    cafile: Optional[str] = None
    certfile: Optional[str] = None
    keyfile: Optional[str] = None
    verify: bool = True
    server_hostname: Optional[str] = None

    def __post_init__(self):
        if str(self.min_version) not in _TLS_VERSIONS:
            raise TlsConfigError(f"TLS minimum version {self.min_version} rejected; need 1.2 or newer")
        self.min_version = str(self.min_version)

    def client_context(self) -> ssl.SSLContext:
        try:
            ctx = ssl.create_default_context(cafile=self.cafile)
            ctx.minimum_version = _TLS_VERSIONS[self.min_version]
            if not self.verify:
                ctx.check_hostname = False
                ctx.verify_mode = ssl.CERT_NONE
            if self.certfile:
                ctx.load_cert_chain(self.certfile, self.keyfile)
        except (OSError, ssl.SSLError) as exc:
            raise TlsConfigError(str(exc)) from None
        return ctx

    def server_context(self) -> ssl.SSLContext:
        if not self.certfile:
            raise TlsConfigError("server TLS needs certfile")
        try:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.minimum_version = _TLS_VERSIONS[self.min_version]
            ctx.load_cert_chain(self.certfile, self.keyfile)
        except (OSError, ssl.SSLError) as exc:
            raise TlsConfigError(str(exc)) from None
        return ctx


# --- sinks -----------------------------------------------------------------

class MemorySink:
    """Keeps every published frame in order; ``available`` simulates outages."""

    def __init__(self):
        self.frames: list[bytes] = []
        self.available = True
        self._lock = threading.Lock()

    def publish(self, topic: str, events) -> bool:
        if not events:
            return True
        if not self.available:
            raise SinkUnavailable("memory sink marked unavailable")
        frame = encode_frame(encode_body(topic, events))
        with self._lock:
            self.frames.append(frame)
        return True

    def messages(self) -> list[dict]:
        with self._lock:
            return [json.loads(f[HEADER.size:]) for f in self.frames]

    def events(self) -> list[dict]:
        return [e for m in self.messages() for e in m["events"]]

    def close(self):
        pass


class FileSink:
    """Appends each message body as one NDJSON line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    def publish(self, topic: str, events) -> bool:
        if not events:
            return True
        try:
            self._fh.write(encode_body(topic, events) + b"\n")
            self._fh.flush()
        except OSError as exc:
            raise SinkUnavailable(str(exc)) from None
        return True

    def close(self):
        self._fh.close()


class SocketSink:
    """Framed publish over TCP, optionally TLS; waits for the broker ack."""

    def __init__(self, host: str, port: int, tls: Optional[TlsConfig] = None, timeout: float = 5.0,
                 persistent: bool = True):
        self.host, self.port = host, int(port)
        self.tls = tls
        self.timeout = timeout
        self.persistent = persistent
        self._ctx = tls.client_context() if tls else None
        self._sock = None

    def connect(self) -> None:
        try:
            raw = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise ConnectError(f"{self.host}:{self.port}: {exc}") from None
        if self._ctx is not None:
            try:
                raw = self._ctx.wrap_socket(raw, server_hostname=self.tls.server_hostname or self.host)
            except (OSError, ssl.SSLError) as exc:
                raw.close()
                raise ConnectError(f"TLS handshake failed: {exc}") from None
        self._sock = raw

    def publish(self, topic: str, events) -> bool:
        if not events:
            return True
        body = encode_body(topic, events)
        try:
            if self._sock is None:
                self.connect()
            self._sock.sendall(encode_frame(body))
            reply = read_frame(self._sock)
            if reply is None or "ack" not in json.loads(reply):
                raise ConnectionError("no ack from broker")
        except (OSError, ConnectError, ValueError) as exc:
            self.close()
            raise SinkUnavailable(str(exc)) from None
        if not self.persistent:
            self.close()
        return True

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


def connect_sink(kind: str, config: Optional[dict] = None):
    cfg = dict(config or {})
    if kind == "memory":
        return MemorySink()
    if kind == "file":
        if "path" not in cfg:
            raise ConfigError("file sink needs a path")
        return FileSink(cfg["path"])
    if kind == "socket":
        tls = cfg.get("tls")
        if isinstance(tls, dict):
            tls = TlsConfig(**tls)
        sink = SocketSink(cfg.get("host", "127.0.0.1"), int(cfg["port"]), tls,
                          float(cfg.get("timeout", 5.0)), bool(cfg.get("persistent", True)))
        if sink.persistent:
            sink.connect()
        return sink
    raise ConfigError(f"unknown sink kind {kind!r}")


def publish(sink, topic: str, events) -> bool:
    return sink.publish(topic, list(events))


# --- batching --------------------------------------------------------------

@dataclass(frozen=True)
class BatcherConfig:
    interval_ms: float = 15000.0
    max_batch: int = 256
    buffer_capacity: int = 10000
    overflow: str = "drop_oldest_routine"
    initial_backoff_ms: float = 1000.0
    heartbeat_every: int = 4

    def __post_init__(self):
        if not self.interval_ms > 0:
            raise ConfigError("interval_ms must be positive")
        if self.max_batch < 1:
            raise ConfigError("max_batch must be >= 1")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be >= 1")
        if self.overflow != "drop_oldest_routine":
            raise ConfigError(f"unsupported overflow policy {self.overflow!r}")


@dataclass
class Delivery:
    t_ms: float
    topic: str
    count: int
    ok: bool = True


class Batcher:
    """Thread-safe event buffer with a clock supplied by the caller."""

    def __init__(self, sink, cfg: BatcherConfig = BatcherConfig(), device_id: str = "cribwatch-0",
                 start_ms: float = 0.0):
        self.sink = sink
        self.cfg = cfg
        self.device_id = device_id
        self.routine: deque = deque()
        self.critical: deque = deque()
        self.last_flush_ms = start_ms
        self.enqueued = 0
        self.delivered = 0
        self.dropped_routine = 0
        self.heartbeats = 0
        self.deliveries: list[Delivery] = []
        self._retry_at: Optional[float] = None
        self._failures = 0
        self._critical_retry_at: Optional[float] = None
        self._critical_failures = 0
        self._idle_ticks = 0
        self._lock = threading.RLock()
        self.wakeup = threading.Event()

    @property
    def pending(self) -> int:
        with self._lock:
            return len(self.routine) + len(self.critical)

    def enqueue(self, event: TelemetryEvent) -> bool:
        """Buffer an event. Returns False if a routine event was shed on arrival."""
        with self._lock:
            self.enqueued += 1
            if len(self.routine) + len(self.critical) >= self.cfg.buffer_capacity:
                if self.routine:
                    self.routine.popleft()
                    self.dropped_routine += 1
                elif event.priority == "critical":
                    self.enqueued -= 1
                    raise BufferFullCritical(
                        f"{len(self.critical)} undelivered critical events fill the buffer"
                    )
                else:
                    self.dropped_routine += 1
                    return False
            if event.priority == "critical":
                self.critical.append(event)
                self.wakeup.set()
            else:
                self.routine.append(event)
        return True

    def _backoff(self, failures: int) -> float:
        return min(self.cfg.initial_backoff_ms * 2 ** (failures - 1), self.cfg.interval_ms)

    def dispatch_critical(self, now_ms: float) -> int:
        """Hand every waiting critical event to the sink, oldest first."""
        sent = 0
        with self._lock:
            if self._critical_retry_at is not None and now_ms < self._critical_retry_at:
                return 0
            while self.critical:
                ev = self.critical[0]
                try:
                    self.sink.publish(topic_for(self.device_id, ev.kind), [ev])
                except SinkUnavailable as exc:
                    self._critical_failures += 1
                    self._critical_retry_at = now_ms + self._backoff(self._critical_failures)
                    self.deliveries.append(Delivery(now_ms, topic_for(self.device_id, ev.kind), 1, False))
                    log.warning("critical publish failed: %s", exc)
                    break
                self.critical.popleft()
                self.delivered += 1
                sent += 1
                self.deliveries.append(Delivery(now_ms, topic_for(self.device_id, ev.kind), 1))
            else:
                self._critical_failures = 0
                self._critical_retry_at = None
        return sent

    def flush_tick(self, now_ms: float) -> Optional[Delivery]:
        """Deliver the pending routine batch if the interval (or retry) is due."""
        with self._lock:
            due = self._retry_at if self._retry_at is not None else self.last_flush_ms + self.cfg.interval_ms
            if now_ms < due:
                return None
            if not self.routine:
                self.last_flush_ms = now_ms
                self._idle_ticks += 1
                if self._idle_ticks % self.cfg.heartbeat_every:
                    return None
                hb = make_event("heartbeat", now_ms, {"pending": len(self.critical)}, self.device_id)
                topic = topic_for(self.device_id, "heartbeat")
                try:
                    self.sink.publish(topic, [hb])
                except SinkUnavailable:
                    d = Delivery(now_ms, topic, 1, False)
                else:
                    self.heartbeats += 1
                    d = Delivery(now_ms, topic, 1)
                self.deliveries.append(d)
                return d
            batch = [self.routine[i] for i in range(min(self.cfg.max_batch, len(self.routine)))]
            topic = topic_for(self.device_id, "batch")
            try:
                self.sink.publish(topic, batch)
            except SinkUnavailable as exc:
                self._failures += 1
                self._retry_at = now_ms + self._backoff(self._failures)
                d = Delivery(now_ms, topic, len(batch), False)
                self.deliveries.append(d)
                log.warning("batch publish failed (%d in a row): %s", self._failures, exc)
                return d
            for _ in batch:
                self.routine.popleft()
            self.delivered += len(batch)
            self.last_flush_ms = now_ms
            self._failures = 0
            self._retry_at = None
            self._idle_ticks = 0
            d = Delivery(now_ms, topic, len(batch))
            self.deliveries.append(d)
            return d

    def pump(self, now_ms: float) -> None:
        self.dispatch_critical(now_ms)
        self.flush_tick(now_ms)

    def drain(self, now_ms: float, attempts: int = 3) -> bool:
        """Final flush ignoring the schedule, retrying each failure up to ``attempts`` times.

        Returns True if nothing is left pending.
        """
        with self._lock:
            failures = 0
            while (self.routine or self.critical) and failures < attempts:
                self._critical_retry_at = None
                self.dispatch_critical(now_ms)
                if self.critical:
                    failures += 1
                    continue
                if not self.routine:
                    break
                self._retry_at = None
                self.last_flush_ms = now_ms - self.cfg.interval_ms
                d = self.flush_tick(now_ms)
                if d is None or not d.ok:
                    failures += 1
            return not self.routine and not self.critical

    def stats(self) -> dict:
        with self._lock:
            return {"enqueued": self.enqueued, "delivered": self.delivered,
                    "pending": len(self.routine) + len(self.critical),
                    "dropped_routine": self.dropped_routine, "heartbeats": self.heartbeats}


class Dispatcher:
    """Background thread pumping a batcher on the monotonic clock.

    Critical enqueues wake the thread at once; otherwise it polls every
    ``cycle_ms``. Batcher times are milliseconds since ``start()``.
    """

    def __init__(self, batcher: Batcher, cycle_ms: float = 10.0, clock=time.monotonic):
        self.batcher = batcher
        self.cycle_ms = cycle_ms
        self.clock = clock
        self._t0 = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def now_ms(self) -> float:
        return (self.clock() - self._t0) * 1000.0

    def start(self) -> "Dispatcher":
        self._t0 = self.clock()
        self.batcher.last_flush_ms = 0.0
        self._thread = threading.Thread(target=self._loop, name="telemetry-dispatch", daemon=True)
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            self.batcher.wakeup.wait(self.cycle_ms / 1000.0)
            self.batcher.wakeup.clear()
            self.batcher.pump(self.now_ms())

    def stop(self, drain: bool = True) -> None:
        self._stop.set()
        self.batcher.wakeup.set()
        if self._thread is not None:
            self._thread.join()
        if drain:
            self.batcher.drain(self.now_ms())


# --- mock broker -----------------------------------------------------------

class MockBroker:
    """Accept-log-ack test double for the socket sink.

    Every received body is appended verbatim as one line to ``log_path``
    before the ack is sent. With ``fail_every=N`` every N-th accepted
    connection is closed immediately.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, log_path=None, fail_every: int = 0,
                 tls: Optional[TlsConfig] = None):
        self.fail_every = int(fail_every)
        self.frames: list[bytes] = []
        self.connections = 0
        self.refused = 0
        self._lock = threading.Lock()
        self._log = open(log_path, "ab") if log_path else None
        self._ctx = tls.server_context() if tls else None
        broker = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                broker._serve(self.request)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        try:
            self._server = Server((host, port), Handler)
        except OSError as exc:
            if self._log:
                self._log.close()
            raise ConnectError(f"cannot bind {host}:{port}: {exc}") from None
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    def _serve(self, conn):
        with self._lock:
            self.connections += 1
            refuse = self.fail_every > 0 and self.connections % self.fail_every == 0
            if refuse:
                self.refused += 1
        if refuse:
            conn.close()
            return
        if self._ctx is not None:
            try:
                conn = self._ctx.wrap_socket(conn, server_side=True)
            except (OSError, ssl.SSLError) as exc:
                log.info("TLS handshake rejected: %s", exc)
                conn.close()
                return
        try:
            while True:
                body = read_frame(conn)
                if body is None:
                    break
                with self._lock:
                    self.frames.append(body)
                    seq = len(self.frames)
                    if self._log:
                        self._log.write(body + b"\n")
                        self._log.flush()
                conn.sendall(encode_frame(json.dumps({"ack": seq}).encode()))
        except (OSError, ValueError) as exc:
            log.info("broker connection ended: %s", exc)
        finally:
            conn.close()

    def start(self) -> "MockBroker":
        self._thread = threading.Thread(target=self._server.serve_forever, name="mock-broker", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()
        with self._lock:
            if self._log:
                self._log.flush()
                self._log.close()
                self._log = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
