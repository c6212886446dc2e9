import datetime
import json
import random
import socket
import struct
import time

import pytest

from oracles import flush_schedule
from cribwatch.errors import BufferFullCritical, ConfigError, ConnectError, SinkUnavailable, TlsConfigError
from cribwatch.telemetry import (Batcher, BatcherConfig, Dispatcher, MemorySink, MockBroker,
                                 SocketSink, TlsConfig, connect_sink, encode_body, make_event, publish,
                                 read_frame, topic_for)

DEV = "dev-1"


def routine(t, i=0):
    return make_event("counter_snapshot", t, {"cumulative_ms": {"crying": float(i)}, "track": 0}, DEV)


def alert(t):
    return make_event("alert", t, {"label": "crying", "episode_start_ms": t - 10000, "raised_at_ms": t,
                                   "sustain_ms": 10000.0, "track": 0}, DEV)


def test_event_schema():
    e = alert(12000.0)
    d = e.as_dict()
    assert d["schema_version"] == 1 and d["priority"] == "critical" and d["wall_time"].endswith("Z")
    assert e.idempotency_key == (DEV, 12000.0, "alert")
    with pytest.raises(ValueError):
        make_event("alert", 0, {"label": "crying"}, DEV)
    with pytest.raises(ValueError):
        make_event("alert", 0, alert(1).payload, DEV, priority="routine")
    with pytest.raises(ValueError):
        make_event("mystery", 0, {}, DEV)
    assert topic_for(DEV, "batch") == "nicu/dev-1/batch"


def test_alert_delivered_before_tick():
    sink = MemorySink()
    b = Batcher(sink)
    b.enqueue(routine(100))
    b.enqueue(alert(200))
    b.pump(210)
    msgs = sink.messages()
    assert len(msgs) == 1 and msgs[0]["topic"] == "nicu/cribwatch-0/alert"
    assert b.pending == 1


def test_flush_schedule_matches_oracle(derived):
    sink = MemorySink()
    b = Batcher(sink, BatcherConfig(interval_ms=15000))
    times = [i * 10.0 for i in range(100)]
    got = []
    t = 0.0
    i = 0
    while t <= 30000:
        while i < len(times) and times[i] <= t:
            b.enqueue(routine(times[i], i))
            i += 1
        d = b.flush_tick(t)
        if d is not None and d.topic.endswith("/batch"):
            got.append([d.t_ms, d.count])
        t += 10.0
    want = [list(x) for x in flush_schedule(times, 15000.0, 30000.0)]
    assert got == want == derived["batch_schedule"]


def test_tick_boundaries():
    sink = MemorySink()
    b = Batcher(sink)
    for i in range(3):
        b.enqueue(routine(i, i))
    assert b.flush_tick(14999) is None
    d = b.flush_tick(15000)
    assert d.count == 3 and b.pending == 0


def test_overflow_keeps_criticals():
    sink = MemorySink()
    sink.available = False
    b = Batcher(sink, BatcherConfig(buffer_capacity=10))
    for i in range(15):
        b.enqueue(routine(i, i))
        if i in (4, 9):
            b.enqueue(alert(1000 + i))
    b.pump(15000)  # outage
    sink.available = True
    b.drain(40000)
    evs = sink.events()
    kinds = [e["kind"] for e in evs]
    assert kinds.count("alert") == 2
    kept = [e["payload"]["cumulative_ms"]["crying"] for e in evs if e["kind"] == "counter_snapshot"]
    assert kept == [float(i) for i in range(7, 15)]
    assert b.dropped_routine == 7


def test_buffer_full_of_criticals():
    b = Batcher(MemorySink(), BatcherConfig(buffer_capacity=2))
    b.sink.available = False
    b.enqueue(alert(1))
    b.enqueue(alert(2))
    with pytest.raises(BufferFullCritical):
        b.enqueue(alert(3))
    assert b.enqueue(routine(4)) is False


def test_outage_then_single_combined_delivery():
    sink = MemorySink()
    b = Batcher(sink, BatcherConfig(max_batch=256))
    for i in range(40):
        b.enqueue(routine(i * 100, i))
    sink.available = False
    fails = [b.flush_tick(t) for t in (15000, 16000)]
    assert all(d is not None and not d.ok for d in fails)
    assert b.flush_tick(17000) is None  # second backoff is 2 s
    sink.available = True
    d = b.flush_tick(18000)
    assert d.ok and d.count == 40 <= 256
    assert len(sink.messages()) == 1


def test_backoff_capped():
    b = Batcher(MemorySink(), BatcherConfig(interval_ms=5000))
    assert [b._backoff(k) for k in (1, 2, 3, 4, 5)] == [1000, 2000, 4000, 5000, 5000]


def test_heartbeat_every_fourth_idle_tick():
    sink = MemorySink()
    b = Batcher(sink)
    for k in range(1, 9):
        b.flush_tick(15000 * k)
    assert [m["topic"] for m in sink.messages()] == ["nicu/cribwatch-0/heartbeat"] * 2
    assert sink.events()[0]["payload"] == {"pending": 0}


def test_priority_order_within_class():
    sink = MemorySink()
    b = Batcher(sink)
    for i in range(5):
        b.enqueue(routine(i, i))
        b.enqueue(alert(100 + i))
    b.pump(0)
    b.drain(20000)
    evs = sink.events()
    crit = [e["t_ms"] for e in evs if e["kind"] == "alert"]
    rout = [e["t_ms"] for e in evs if e["kind"] != "alert"]
    assert crit == sorted(crit) and rout == sorted(rout)
    assert evs[0]["kind"] == "alert"


def test_conservation_random():
    rng = random.Random(4)
    sink = MemorySink()
    b = Batcher(sink, BatcherConfig(max_batch=50))
    t = 0.0
    for i in range(3000):
        t += rng.random() * 20
        b.enqueue(alert(t) if rng.random() < 0.1 else routine(t, i))
        if rng.random() < 0.3:
            b.pump(t)
        s = b.stats()
        assert s["enqueued"] == s["delivered"] + s["pending"]
    assert len(sink.events()) == b.delivered


def test_config_validation():
    for bad in (dict(interval_ms=0), dict(max_batch=0), dict(buffer_capacity=0), dict(overflow="x")):
        with pytest.raises(ConfigError):
            BatcherConfig(**bad)


def test_dispatcher_critical_latency():
    sink = MemorySink()
    b = Batcher(sink)
    d = Dispatcher(b).start()
    try:
        time.sleep(0.05)
        t0 = time.monotonic()
        b.enqueue(alert(1))
        while not sink.frames and time.monotonic() - t0 < 1:
            time.sleep(0.0005)
        assert (time.monotonic() - t0) * 1000 < 100
    finally:
        d.stop()


def test_memory_sink_order_and_empty():
    sink = connect_sink("memory")
    assert publish(sink, "t", []) is True and sink.frames == []
    publish(sink, "t", [routine(1, 1), routine(2, 2)])
    m = sink.messages()[0]
    assert [e["t_ms"] for e in m["events"]] == [1.0, 2.0]


def test_frame_length_prefix_large():
    sink = MemorySink()
    big = [routine(i, i) for i in range(8000)]
    publish(sink, "t", big)
    frame = sink.frames[0]
    (n,) = struct.unpack("!I", frame[:4])
    assert n == len(frame) - 4 == len(encode_body("t", big))
    assert n >= 1 << 20


def test_file_sink(tmp_path):
    s = connect_sink("file", {"path": tmp_path / "t.ndjson"})
    s.publish("a", [routine(1)])
    s.publish("b", [routine(2)])
    s.close()
    lines = (tmp_path / "t.ndjson").read_text().splitlines()
    assert [json.loads(x)["topic"] for x in lines] == ["a", "b"]
    with pytest.raises(ConfigError):
        connect_sink("file", {})


def test_socket_sink_broker_byte_for_byte(tmp_path):
    log = tmp_path / "broker.ndjson"
    with MockBroker(log_path=log) as broker:
        sink = connect_sink("socket", {"port": broker.port})
        bodies = []
        for k in range(3):
            evs = [routine(k * 10 + j, j) for j in range(k + 1)]
            sink.publish("nicu/x/batch", evs)
            bodies.append(encode_body("nicu/x/batch", evs))
        sink.close()
    assert log.read_bytes() == b"".join(b + b"\n" for b in bodies)


def test_broker_fail_every(tmp_path):
    with MockBroker(fail_every=2) as broker:
        sink = SocketSink("127.0.0.1", broker.port, persistent=False)
        sink.publish("t", [routine(1)])
        with pytest.raises(SinkUnavailable):
            sink.publish("t", [routine(2)])
        sink.publish("t", [routine(2)])  # retry on a fresh connection
        assert broker.refused == 1 and len(broker.frames) == 2


def test_batcher_retries_through_broker_faults():
    with MockBroker(fail_every=2) as broker:
        sink = SocketSink("127.0.0.1", broker.port, persistent=False)
        b = Batcher(sink)
        for t in range(0, 60000, 500):
            b.enqueue(routine(t))
            b.pump(float(t))
        b.drain(60000)
        assert b.delivered == b.enqueued
        assert any(not d.ok for d in b.deliveries)


def test_connect_refused():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(ConnectError):
        connect_sink("socket", {"port": port, "timeout": 1})


def test_tls_min_version_policy():
    with pytest.raises(TlsConfigError):
        TlsConfig(min_version="1.0")
    with pytest.raises(TlsConfigError):
        connect_sink("socket", {"port": 1, "tls": {"min_version": "1.1"}})


@pytest.fixture(scope="module")
def cert_pair(tmp_path_factory):
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID
    import ipaddress

    d = tmp_path_factory.mktemp("tls")
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "localhost")])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (x509.CertificateBuilder().subject_name(name).issuer_name(name).public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=1))
            .add_extension(x509.SubjectAlternativeName([x509.DNSName("localhost"),
                                                        x509.IPAddress(ipaddress.ip_address("127.0.0.1"))]),
                           critical=False)
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .sign(key, hashes.SHA256()))
    (d / "cert.pem").write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    (d / "key.pem").write_bytes(key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                                  serialization.NoEncryption()))
    return str(d / "cert.pem"), str(d / "key.pem")


def test_tls_roundtrip(cert_pair, tmp_path):
    cert, key = cert_pair
    log = tmp_path / "b.ndjson"
    with MockBroker(log_path=log, tls=TlsConfig(certfile=cert, keyfile=key)) as broker:
        sink = connect_sink("socket", {"port": broker.port, "tls": {"cafile": cert, "min_version": "1.2"}})
        assert sink._sock.version() in ("TLSv1.2", "TLSv1.3")
        sink.publish("nicu/x/alert", [alert(12000)])
        sink.close()
    assert json.loads(log.read_text())["topic"] == "nicu/x/alert"


def test_tls_untrusted_rejected(cert_pair):
    cert, key = cert_pair
    with MockBroker(tls=TlsConfig(certfile=cert, keyfile=key)) as broker:
        with pytest.raises(ConnectError):
            connect_sink("socket", {"port": broker.port, "tls": {"min_version": "1.2"}, "timeout": 2})


def test_read_frame_eof():
    a, b = socket.socketpair()
    a.sendall(struct.pack("!I", 5) + b"hello")
    a.close()
    assert read_frame(b) == b"hello"
    assert read_frame(b) is None
    b.close()
