"""Command-line entry point: run, replay, bench, analyze, broker.

Exit codes: 0 ok, 1 configuration error, 2 budget failure, 3 source/IO error.
Every error path prints one ``error_code=<kind> reason="..."`` line on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import bench
from .classify import PlattParams, get_task, load_profiles, make_backend, LatencyModelBackend
from .errors import (ConfigError, ConnectError, CribwatchError, EmptyDirectory, ParseError,
                     TlsConfigError, UnsupportedFormat, ValidationError)
from .frames import Resolution, load_scenario, read_image_sequence, synth_stream
from .pipeline import Pipeline, PipelineConfig
from .telemetry import (Batcher, BatcherConfig, Dispatcher, MemorySink, MockBroker, TlsConfig,
                        connect_sink)
from .temporal import AlertRule, FilterConfig

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_SOURCE = 0, 1, 2, 3

log = logging.getLogger("cribwatch")


class CliError(Exception):
    def __init__(self, code: int, kind: str, reason: str):
        super().__init__(reason)
        self.code, self.kind, self.reason = code, kind, reason


def default_config() -> dict:
    return json.loads((Path(__file__).parent / "data" / "default_config.json").read_text())


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``dotted.path=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        cfg = deep_merge(cfg, user)
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def pipeline_config(cfg: dict, fps: float, resolution: Resolution) -> PipelineConfig:
    try:
        task = get_task(cfg.get("task", "cry_normal"))
        p = dict(cfg.get("pipeline", {}))
        cal = cfg.get("calibration", {}) or {}
        if isinstance(cal, str):
            calibration = PlattParams.load(cal, task.name)
        else:
            calibration = PlattParams(float(cal.get("a", 1.0)), float(cal.get("b", 0.0)))
        f = cfg.get("filter", {})
        filt = FilterConfig(int(f.get("window_frames", 5)), fps, str(f.get("decision", "majority")))
        rules = tuple(AlertRule(str(r["label"]), float(r.get("sustain_ms", 10000)),
                                float(r.get("cooldown_ms", 60000))) for r in cfg.get("alerts", []))
        for r in rules:
            if r.label not in task.labels:
                raise ConfigError(f"alert label {r.label!r} not in task {task.name}")
        gate = p.get("gate")
        return PipelineConfig(
            task=task,
            backend=dict(cfg.get("backend", {"kind": "oracle"})),
            fps=fps,
            resolution=resolution,
            queue_capacity=int(p.get("queue_capacity", 8)),
            drop_policy=str(p.get("drop_policy", "drop_oldest")),
            workers=int(p.get("workers", 1)),
            executor=str(p.get("executor", "thread")),
            gate=None if gate is None else float(gate),
            skip=int(p.get("skip", 1)),
            latency_budget_ms=float(p.get("latency_budget_ms", 1000)),
            mode=str(p.get("mode", "fast")),
            min_confidence=float(p.get("min_confidence", 0.5)),
            max_faces=int(p.get("max_faces", 5)),
            filter=filt,
            alert_rules=rules,
            calibration=calibration,
            snapshot_every_ms=float(cfg.get("telemetry", {}).get("snapshot_every_ms", 1000)),
            device_id=str(cfg.get("telemetry", {}).get("device_id", "cribwatch-0")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad configuration: {exc}") from None


def output_dir(args) -> Path:
    d = Path(args.output_dir or os.environ.get("CRIBWATCH_OUTPUT_DIR") or "cribwatch-out")
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_SOURCE, "io", f"cannot create output dir {d}: {exc}") from None
    return d


def _apply_run_flags(cfg: dict, args) -> None:
    b = cfg.setdefault("backend", {})
    if args.backend:
        if args.backend != b.get("kind"):
            cfg["backend"] = b = {"kind": args.backend}
    if args.profile:
        b["profile"] = args.profile
    if args.noise is not None:
        b["noise"] = args.noise
    if args.seed is not None:
        b["seed"] = args.seed
    p = cfg.setdefault("pipeline", {})
    for flag, key in (("mode", "mode"), ("workers", "workers"), ("skip", "skip"), ("gate", "gate"),
                      ("queue_capacity", "queue_capacity"), ("drop_policy", "drop_policy")):
        v = getattr(args, flag, None)
        if v is not None:
            p[key] = v
    if args.budget_ms is not None:
        p["latency_budget_ms"] = args.budget_ms
    if args.telemetry:
        cfg.setdefault("telemetry", {})["sink"] = args.telemetry


def _build_sink(tcfg: dict, out: Path, args):
    kind = tcfg.get("sink", "memory")
    if kind in (None, "none"):
        return None
    if kind == "file":
        return connect_sink("file", {"path": tcfg.get("path") or out / "telemetry.ndjson"})
    if kind == "socket":
        host, port = (args.broker or tcfg.get("broker", "127.0.0.1:1883")).rsplit(":", 1)
        tls = tcfg.get("tls")
        if args.tls_ca:
            tls = {"cafile": args.tls_ca, "min_version": "1.2"}
        return connect_sink("socket", {"host": host, "port": int(port), "tls": tls})
    return connect_sink(kind, tcfg)


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or [])
    _apply_run_flags(cfg, args)
    out = output_dir(args)

    if bool(args.scenario) == bool(args.images):
        raise ConfigError("give exactly one of --scenario or --images")
    if args.scenario:
        try:
            script = load_scenario(args.scenario)
        except (ParseError, ValidationError) as exc:
            raise ConfigError(f"scenario: {exc}") from None
        fps, res = script.fps, script.resolution
        source = synth_stream(script)
    else:
        fps = float(args.fps or 25.0)
        try:
            source = read_image_sequence(args.images, fps)
        except (EmptyDirectory, UnsupportedFormat) as exc:
            raise CliError(EXIT_SOURCE, "source", str(exc)) from None
        res = Resolution(640, 480)

    pcfg = pipeline_config(cfg, fps, res)
    tcfg = cfg.get("telemetry", {})
    try:
        sink = _build_sink(tcfg, out, args)
    except (ConnectError, TlsConfigError) as exc:
        raise CliError(EXIT_SOURCE, "telemetry", str(exc)) from None
    batcher = dispatcher = None
    if sink is not None:
        bcfg = BatcherConfig(float(tcfg.get("interval_ms", 15000)), int(tcfg.get("max_batch", 256)),
                             int(tcfg.get("buffer_capacity", 10000)))
        batcher = Batcher(sink, bcfg, pcfg.device_id)
        if pcfg.mode == "realtime":
            dispatcher = Dispatcher(batcher).start()

    backend = make_backend(pcfg.backend.get("kind", "oracle"), pcfg.backend)
    pipe = Pipeline(pcfg, backend=backend, batcher=batcher, pump_telemetry=dispatcher is None,
                    frame_log=out / "frames.ndjson",
                    annotate_dir=(out / "annotated") if args.annotate else None)
    try:
        report = pipe.run(source)
    finally:
        pipe.close()
        if dispatcher is not None:
            dispatcher.stop(drain=True)
            report.telemetry = batcher.stats()
        if sink is not None:
            if isinstance(sink, MemorySink):
                with open(out / "telemetry.ndjson", "w") as fh:
                    for m in sink.messages():
                        fh.write(json.dumps(m, separators=(",", ":")) + "\n")
            sink.close()

    (out / "report.json").write_text(report.to_json() + "\n")
    with open(out / "alerts.ndjson", "w") as fh:
        for a in report.alerts:
            fh.write(json.dumps(a.as_dict()) + "\n")
    print(f"frames_in={report.frames_in} processed={report.frames_processed} "
          f"dropped={report.frames_dropped} alerts={len(report.alerts)} output={out}")

    if report.incomplete:
        raise CliError(EXIT_SOURCE, "source", report.error or "source failed")
    if args.enforce_budget:
        budget = args.budget_ms if args.budget_ms is not None else pcfg.latency_budget_ms
        verdict = bench.end_to_end_budget_check(report, budget)
        print(f"budget_check passed={verdict.passed} mean_ms={verdict.mean_ms:.3f} "
              f"violation_rate={verdict.violation_rate:.4f}")
        if not verdict.passed:
            raise CliError(EXIT_BUDGET, "budget", verdict.reason)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.n < 30:
        raise ConfigError(f"--n must be at least 30 (got {args.n})")
    if args.warmup < 1:
        raise ConfigError("--warmup must be at least 1")
    profiles = load_profiles(args.profiles)
    rows = [bench.BenchRow.from_profile(p) for p in profiles]
    if args.measure:
        for p in profiles:
            backend = LatencyModelBackend(p, seed=args.seed or 0, wait=args.wait)
            res = bench.measure_backend(backend, n=args.n, warmup=args.warmup)
            rows.append(bench.BenchRow.from_measurement(res, p.stored_size_mb, f"{p.name} (measured)"))
            print(f"{p.name}: mean={res.stats.mean_ms:.3f} ms (profile {p.mean_ms}) "
                  f"std={res.stats.std_ms:.3f} peak_mem={res.peak_memory_mb:.2f} MB")
    out = output_dir(args)
    for path in bench.emit_report(out, rows):
        print(path)
    return EXIT_OK


def _parse_sweep(args) -> dict:
    if args.sweep:
        try:
            doc = json.loads(Path(args.sweep).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep {args.sweep}: {exc}") from None
    else:
        doc = {}

    def listed(text):
        return [t for t in (s.strip() for s in text.split(",")) if t]

    if args.resolutions is not None:
        doc["resolutions"] = listed(args.resolutions)
    if args.target_fps is not None:
        doc["target_fps"] = [float(x) for x in listed(args.target_fps)]
    if args.pose is not None:
        doc["pose"] = [x == "on" for x in listed(args.pose)]
    if args.faces is not None:
        doc["faces"] = [int(x) for x in listed(args.faces)]
    if args.skip is not None:
        doc["skip"] = [int(x) for x in listed(args.skip)]
    doc.setdefault("resolutions", ["720p", "480p", "360p"])
    doc.setdefault("target_fps", [30.0, 25.0])
    doc.setdefault("pose", [False, True])
    doc.setdefault("faces", [1])
    doc.setdefault("skip", [1])
    try:
        doc["resolutions"] = [r if isinstance(r, Resolution) else Resolution.parse(str(r))
                              for r in doc["resolutions"]]
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    return doc


def cmd_analyze(args) -> int:
    model = bench.load_cost_model(args.model)
    sweep = _parse_sweep(args)
    results = bench.feasibility_sweep(model, sweep["resolutions"], sweep["faces"], sweep["pose"],
                                      sweep["skip"], sweep["target_fps"])
    out = output_dir(args)
    path = bench.write_feasibility_csv(out / "feasibility.csv", results)
    for r in results:
        print(f"{r.resolution} faces={r.max_faces} pose={'on' if r.include_pose else 'off'} "
              f"skip={r.skip} fps={r.target_fps:g}: mid={r.midpoint_ms:.2f} ms "
              f"budget={r.budget_ms:.2f} feasible_mid={r.feasible_mid} limiting={r.limiting_stage}")
    print(path)
    return EXIT_OK


def cmd_broker(args) -> int:
    tls = None
    if args.tls_cert:
        tls = TlsConfig(certfile=args.tls_cert, keyfile=args.tls_key)
    try:
        broker = MockBroker(args.host, args.port, args.log, args.fail_every, tls)
    except ConnectError as exc:
        raise CliError(EXIT_CONFIG, "bind", str(exc)) from None
    done = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: done.set())
    broker.start()
    host, port = broker.address
    print(f"listening host={host} port={port}", flush=True)
    done.wait()
    broker.stop()
    print(f"stopped frames={len(broker.frames)} refused={broker.refused}", flush=True)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cribwatch", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file merged over the defaults")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override")
        p.add_argument("--output-dir", help="defaults to $CRIBWATCH_OUTPUT_DIR or ./cribwatch-out")
        p.add_argument("--seed", type=int)

    for name in ("run", "replay"):
        p = sub.add_parser(name, help="process a scenario or an image sequence")
        common(p)
        p.add_argument("--scenario")
        p.add_argument("--images")
        p.add_argument("--fps", type=float)
        p.add_argument("--backend", choices=["oracle", "latency_model", "external"])
        p.add_argument("--profile", help="latency-model profile name, e.g. MobileNet")
        p.add_argument("--noise", type=float)
        p.add_argument("--mode", choices=["fast", "realtime"],
                       default="realtime" if name == "replay" else None)
        p.add_argument("--workers", type=int)
        p.add_argument("--skip", type=int)
        p.add_argument("--gate", type=float)
        p.add_argument("--queue-capacity", type=int)
        p.add_argument("--drop-policy", choices=["drop_oldest", "block"])
        p.add_argument("--budget-ms", type=float)
        p.add_argument("--enforce-budget", action="store_true")
        p.add_argument("--annotate", action="store_true", help="write annotated PPM + JSON sidecars")
        p.add_argument("--telemetry", choices=["none", "memory", "file", "socket"])
        p.add_argument("--broker", help="HOST:PORT for the socket sink")
        p.add_argument("--tls-ca", help="CA bundle; enables TLS (>= 1.2) on the socket sink")
        p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="emit inference benchmark CSVs")
    common(p)
    p.add_argument("--profiles", help="profiles JSON (defaults to the bundled table)")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--measure", action="store_true", help="also time the latency-model backend live")
    p.add_argument("--wait", choices=["sleep", "busy"], default="sleep")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="feasibility sweep over the per-frame cost model")
    common(p)
    p.add_argument("--model", help="cost model JSON (defaults to the bundled table)")
    p.add_argument("--sweep", help="JSON {resolutions, faces, pose, skip, target_fps}")
    p.add_argument("--resolutions", help="comma list, e.g. 720p,480p,640x360")
    p.add_argument("--target-fps", help="comma list")
    p.add_argument("--pose", help="comma list of on/off")
    p.add_argument("--faces", help="comma list")
    p.add_argument("--skip", help="comma list")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("broker", help="run the mock telemetry broker")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=1883)
    p.add_argument("--log", default="broker.ndjson")
    p.add_argument("--fail-every", type=int, default=0)
    p.add_argument("--tls-cert")
    p.add_argument("--tls-key")
    p.set_defaults(func=cmd_broker)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        err = exc
    except (ConfigError, ValidationError, ParseError, TlsConfigError) as exc:
        err = CliError(EXIT_CONFIG, "config", str(exc))
    except (OSError, CribwatchError) as exc:
        err = CliError(EXIT_SOURCE, "io", str(exc))
    reason = err.reason.replace("\n", " ").replace('"', "'")
    print(f'error_code={err.kind} reason="{reason}"', file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
