"""Per-frame orchestration: bounded ingest queue, worker pool, in-order egress.

Inference work (colour conversion, detection, ROI extraction, backend call)
runs on the worker pool. Everything stateful (face tracks, filters, alerts,
telemetry, logs) runs on the single egress path in frame order.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from concurrent.futures import Future, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .classify import TASKS, PlattParams, Prediction, TaskSpec, classify, make_backend
from .detect import BoundingBox, MarkerDetector, detect_faces, extract_roi, motion_gate, to_rgb
from .errors import ConfigError
from .frames import Frame, Resolution, pace, write_ppm
from .stats import LatencyStats, MemoryProbe, maybe_stats
from .telemetry import Batcher, make_event
from .temporal import (UNKNOWN, Alert, AlertRule, FilterConfig, StableState, TrackSet,
                       alert_check)

log = logging.getLogger(__name__)

STAGES = ("to_rgb", "detect", "preprocess", "classify", "filter", "annotate", "telemetry")


@dataclass
class PipelineConfig:
    task: TaskSpec = TASKS["cry_normal"]
    backend: dict = field(default_factory=lambda: {"kind": "oracle"})
    fps: float = 25.0
    resolution: Resolution = field(default_factory=lambda: Resolution(640, 480))
    queue_capacity: int = 8
    drop_policy: str = "drop_oldest"  # or "block"
    workers: int = 1
    executor: str = "thread"  # or "process"
    gate: Optional[float] = None
    skip: int = 1
    latency_budget_ms: float = 1000.0
    mode: str = "fast"  # or "realtime"
    min_confidence: float = 0.5
    max_faces: int = 5
    filter: FilterConfig = field(default_factory=FilterConfig)
    alert_rules: tuple = (AlertRule("crying"),)
    calibration: PlattParams = field(default_factory=PlattParams)
    snapshot_every_ms: float = 1000.0
    device_id: str = "cribwatch-0"

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.skip < 1:
            raise ConfigError("skip must be >= 1")
        if self.drop_policy not in ("drop_oldest", "block"):
            raise ConfigError(f"unknown drop policy {self.drop_policy!r}")
        if self.executor not in ("thread", "process"):
            raise ConfigError(f"unknown executor {self.executor!r}")
        if self.mode not in ("fast", "realtime"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        if self.filter.fps != self.fps:
            self.filter = replace(self.filter, fps=self.fps)


@dataclass
class Overlay:
    box: BoundingBox
    label: str
    confidence: float
    track: int = 0

    def as_dict(self) -> dict:
        return {"box": self.box.as_dict(), "label": self.label, "confidence": self.confidence,
                "track": self.track}


@dataclass
class AnnotatedFrame:
    frame_index: int
    timestamp_ms: float
    overlays: list
    stable: StableState
    stage_latencies_ms: dict
    end_to_end_ms: float
    gated: bool = False
    failed: bool = False
    error: Optional[str] = None
    ground_truth: Optional[str] = None
    alerts: list = field(default_factory=list)


@dataclass
class InferResult:
    predictions: list = field(default_factory=list)
    latencies: dict = field(default_factory=dict)
    error: Optional[str] = None
    gated: bool = False


def _ms_since(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


def infer_frame(frame: Frame, detector, backend, task: TaskSpec, calibration: PlattParams,
                min_confidence: float, max_faces: int, backend_lock=None) -> InferResult:
    """Stateless part of the frame path; safe to run on any worker."""
    res = InferResult()
    lat = res.latencies
    try:
        t = time.perf_counter()
        rgb = to_rgb(frame)
        lat["to_rgb"] = _ms_since(t)
        t = time.perf_counter()
        boxes = detect_faces(rgb, min_confidence, detector)[:max_faces]
        lat["detect"] = _ms_since(t)
        if not boxes:
            return res
        lat["preprocess"] = lat["classify"] = 0.0
        for box in boxes:
            t = time.perf_counter()
            roi = extract_roi(rgb, box)
            lat["preprocess"] += _ms_since(t)
            t = time.perf_counter()
            if backend_lock is not None:
                with backend_lock:
                    pred = classify(backend, roi, task, calibration)
            else:
                pred = classify(backend, roi, task, calibration)
            lat["classify"] += _ms_since(t)
            pred.timestamp_ms = frame.timestamp_ms
            res.predictions.append(pred)
    except Exception as exc:  # isolate per frame
        res.error = f"{type(exc).__name__}: {exc}"
    return res


# Process-pool workers hold their own copies of these.
_worker_state: dict = {}


def _init_worker(detector, backend, task, calibration, min_confidence, max_faces):
    _worker_state.update(detector=detector, backend=backend, task=task, calibration=calibration,
                         min_confidence=min_confidence, max_faces=max_faces)


def _infer_in_worker(frame: Frame) -> InferResult:
    return infer_frame(frame, **_worker_state)


def annotate(frame: Frame, overlays, out_dir=None, color=(0, 255, 0), thickness: int = 2) -> np.ndarray:
    """Draw box borders onto a copy of the frame.

    With ``out_dir`` set, writes ``frame_<index>.ppm`` (RGB) and a JSON
    sidecar carrying labels and confidences.
    """
    raster = frame.pixels.copy()
    ink = np.array(color if frame.channel_order == "RGB" else color[::-1], dtype=np.uint8)
    for ov in overlays:
        b = ov.box
        t = thickness
        raster[b.y : b.y + min(t, b.h), b.x : b.x + b.w] = ink
        raster[b.y + max(b.h - t, 0) : b.y + b.h, b.x : b.x + b.w] = ink
        raster[b.y : b.y + b.h, b.x : b.x + min(t, b.w)] = ink
        raster[b.y : b.y + b.h, b.x + max(b.w - t, 0) : b.x + b.w] = ink
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rgb = raster if frame.channel_order == "RGB" else raster[..., ::-1]
        write_ppm(out / f"frame_{frame.index:06d}.ppm", rgb)
        sidecar = {"frame_index": frame.index, "timestamp_ms": frame.timestamp_ms,
                   "overlays": [ov.as_dict() for ov in overlays]}
        (out / f"frame_{frame.index:06d}.json").write_text(json.dumps(sidecar) + "\n")
    return raster


@dataclass
class RunReport:
    frames_in: int = 0
    frames_processed: int = 0
    frames_dropped: int = 0
    frames_skipped: int = 0
    frames_gated: int = 0
    frames_failed: int = 0
    stage_latency: dict = field(default_factory=dict)
    end_to_end: Optional[LatencyStats] = None
    achieved_fps: float = 0.0
    peak_memory_mb: float = 0.0
    budget_violations: int = 0
    latency_budget_ms: float = 1000.0
    alerts: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    telemetry: Optional[dict] = None
    incomplete: bool = False
    error: Optional[str] = None
    wall_time_s: float = 0.0
    end_to_end_samples: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "frames_in": self.frames_in,
            "frames_processed": self.frames_processed,
            "frames_dropped": self.frames_dropped,
            "frames_skipped": self.frames_skipped,
            "frames_gated": self.frames_gated,
            "frames_failed": self.frames_failed,
            "alerts": [a.as_dict() for a in self.alerts],
            "counters": {str(k): v for k, v in self.counters.items()},
            "accuracy": self.accuracy,
            "telemetry": self.telemetry,
            "incomplete": self.incomplete,
            "error": self.error,
            "timing": {
                "stage_latency_ms": {k: v.as_dict() for k, v in self.stage_latency.items()},
                "end_to_end_ms": self.end_to_end.as_dict() if self.end_to_end else None,
                "achieved_fps": self.achieved_fps,
                "peak_memory_mb": self.peak_memory_mb,
                "budget_violations": self.budget_violations,
                "latency_budget_ms": self.latency_budget_ms,
                "wall_time_s": self.wall_time_s,
            },
        }

    def to_json(self, deterministic: bool = False) -> str:
        """JSON text; ``deterministic`` drops the wall-clock ``timing`` block."""
        d = self.to_dict()
        if deterministic:
            d.pop("timing")
        return json.dumps(d, sort_keys=True, indent=2)


class _Ingest:
    """Bounded FIFO between the source thread and the dispatcher."""

    END = object()

    def __init__(self, capacity: int, drop_oldest: bool):
        self.capacity = capacity
        self.drop_oldest = drop_oldest
        self.items: deque = deque()
        self.cond = threading.Condition()
        self.high_water = 0

    def put(self, item) -> Optional[tuple]:
        """Enqueue; returns the evicted item when drop-oldest kicks in."""
        with self.cond:
            evicted = None
            if len(self.items) >= self.capacity:
                if self.drop_oldest:
                    evicted = self.items.popleft()
                else:
                    while len(self.items) >= self.capacity:
                        self.cond.wait()
            self.items.append(item)
            self.high_water = max(self.high_water, len(self.items))
            self.cond.notify_all()
            return evicted

    def close(self):
        with self.cond:
            self.items.append(self.END)
            self.cond.notify_all()

    def get(self):
        with self.cond:
            while not self.items:
                self.cond.wait()
            item = self.items.popleft()
            self.cond.notify_all()
            return item


class Pipeline:
    def __init__(self, cfg: PipelineConfig, backend=None, detector=None, batcher: Optional[Batcher] = None,
                 pump_telemetry: bool = True, frame_log=None, annotate_dir=None,
                 on_frame: Optional[Callable[[AnnotatedFrame], None]] = None):
        self.cfg = cfg
        self.backend = backend if backend is not None else make_backend(cfg.backend.get("kind", "oracle"), cfg.backend)
        self.detector = detector or MarkerDetector()
        self.batcher = batcher
        self.pump_telemetry = pump_telemetry
        self.annotate_dir = annotate_dir
        self.on_frame = on_frame
        self._log_fh = open(frame_log, "w") if frame_log else None
        self._log_lock = threading.Lock()
        self._backend_lock = None if getattr(self.backend, "concurrent_safe", False) else threading.Lock()
        self.tracks = TrackSet(cfg.filter, cfg.task.labels)
        self.alerts: list[Alert] = []
        self._stage_samples = {s: [] for s in STAGES}
        self._e2e: list[float] = []
        self._next_snapshot_ms = 0.0
        self._acc = {"frames_compared": 0, "raw_correct": 0, "stable_compared": 0, "stable_correct": 0}
        self._processed = 0
        self._gated = 0
        self._failed = 0
        self._last_ts = 0.0

    # -- egress --------------------------------------------------------------

    def _emit_event(self, kind: str, t_ms: float, payload: dict):
        if self.batcher is not None:
            self.batcher.enqueue(make_event(kind, t_ms, payload, self.cfg.device_id))

    def _egress(self, frame: Frame, res: InferResult, arrival: float) -> AnnotatedFrame:
        lat = dict(res.latencies)
        ts = frame.timestamp_ms
        self._last_ts = ts
        overlays: list[Overlay] = []
        new_alerts: list[Alert] = []
        transitions = []

        t = time.perf_counter()
        if res.gated:
            # No detection: every live track repeats its last prediction.
            for track in self.tracks.tracks:
                last = track.filter.last_prediction
                if last is None:
                    continue
                before = track.filter.state.label
                st = track.filter.update(replace(last, frame_index=frame.index, timestamp_ms=ts, latency_ms=0.0))
                if st.label != before:
                    transitions.append((track, before, st, last.confidence))
                new_alerts += alert_check(st, self.cfg.alert_rules, ts, track.history, track.id)
        elif res.error is None:
            preds: list[Prediction] = res.predictions
            matched = self.tracks.match([p.box for p in preds])
            for track, pred in zip(matched, preds):
                before = track.filter.state.label
                st = track.filter.update(pred)
                if st.label != before:
                    transitions.append((track, before, st, pred.confidence))
                new_alerts += alert_check(st, self.cfg.alert_rules, ts, track.history, track.id)
                overlays.append(Overlay(pred.box, pred.label, pred.confidence, track.id))
        lat["filter"] = _ms_since(t)

        primary = self.tracks.primary()
        stable = primary.filter.state.copy() if primary else StableState(
            cumulative_ms={lab: 0.0 for lab in self.cfg.task.labels})

        if self.annotate_dir is not None:
            t = time.perf_counter()
            annotate(frame, overlays, self.annotate_dir)
            lat["annotate"] = _ms_since(t)

        t = time.perf_counter()
        for track, before, st, conf in transitions:
            self._emit_event("state_transition", ts, {"label": st.label, "previous_label": before,
                                                      "confidence": conf, "track": track.id})
        for a in new_alerts:
            self._emit_event("alert", ts, {"label": a.rule.label, "episode_start_ms": a.episode_start_ms,
                                           "raised_at_ms": a.raised_at_ms, "sustain_ms": a.rule.sustain_ms,
                                           "track": a.track})
        if ts >= self._next_snapshot_ms:
            for track in self.tracks.tracks:
                self._emit_event("counter_snapshot", ts, {"cumulative_ms": dict(track.filter.state.cumulative_ms),
                                                          "track": track.id})
            self._next_snapshot_ms = ts + self.cfg.snapshot_every_ms
        if self.batcher is not None and self.pump_telemetry:
            self.batcher.pump(ts)
        lat["telemetry"] = _ms_since(t)

        self.alerts += new_alerts
        self._processed += 1
        self._gated += res.gated
        self._failed += res.error is not None
        truth = frame.ground_truth
        if truth in self.cfg.task.labels:
            if overlays:
                self._acc["frames_compared"] += 1
                self._acc["raw_correct"] += overlays[0].label == truth
            if stable.label != UNKNOWN:
                self._acc["stable_compared"] += 1
                self._acc["stable_correct"] += stable.label == truth

        e2e = _ms_since(arrival)
        for k, v in lat.items():
            self._stage_samples[k].append(v)
        self._e2e.append(e2e)
        out = AnnotatedFrame(frame.index, ts, overlays, stable, lat, e2e, res.gated,
                             res.error is not None, res.error, truth, new_alerts)
        top = max(overlays, key=lambda o: o.confidence) if overlays else None
        self._write_log({
            "frame_index": frame.index, "stage_latencies_ms": lat, "end_to_end_ms": e2e,
            "label": top.label if top else None, "confidence": top.confidence if top else None,
            "stable_label": stable.label, "dropped": False, "gated": res.gated,
            "failed": res.error is not None,
        })
        log.debug("frame=%d stable=%s faces=%d e2e=%.1fms", frame.index, stable.label, len(overlays), e2e)
        if self.on_frame is not None:
            self.on_frame(out)
        return out

    def _write_log(self, record: dict):
        if self._log_fh is not None:
            with self._log_lock:
                self._log_fh.write(json.dumps(record) + "\n")

    def _infer(self, frame: Frame) -> InferResult:
        return infer_frame(frame, self.detector, self.backend, self.cfg.task, self.cfg.calibration,
                           self.cfg.min_confidence, self.cfg.max_faces, self._backend_lock)

    def process_frame(self, frame: Frame, gated: bool = False) -> AnnotatedFrame:
        arrival = time.perf_counter()
        res = InferResult(gated=True) if gated else self._infer(frame)
        return self._egress(frame, res, arrival)

    # -- run loop ------------------------------------------------------------

    def _make_executor(self):
        cfg = self.cfg
        if cfg.workers == 1 and cfg.executor == "thread":
            return None
        if cfg.executor == "process":
            return ProcessPoolExecutor(
                cfg.workers, initializer=_init_worker,
                initargs=(self.detector, self.backend, cfg.task, cfg.calibration, cfg.min_confidence,
                          cfg.max_faces),
            )
        return ThreadPoolExecutor(cfg.workers, thread_name_prefix="infer")

    def run(self, source: Iterable[Frame], stop: Optional[threading.Event] = None) -> RunReport:
        cfg = self.cfg
        realtime = cfg.mode == "realtime"
        ingest = _Ingest(cfg.queue_capacity, drop_oldest=realtime and cfg.drop_policy == "drop_oldest")
        counts = {"in": 0, "skipped": 0, "dropped": 0}
        failure: dict = {}

        def feed():
            prev = None
            try:
                for frame in pace(source, cfg.fps, cfg.mode):
                    if stop is not None and stop.is_set():
                        break
                    arrival = time.perf_counter()
                    counts["in"] += 1
                    if (counts["in"] - 1) % cfg.skip:
                        counts["skipped"] += 1
                        continue
                    gated = False
                    if cfg.gate is not None and prev is not None:
                        gated = not motion_gate(prev, frame, cfg.gate)
                    prev = frame
                    evicted = ingest.put((frame, arrival, gated))
                    if evicted is not None:
                        counts["dropped"] += 1
                        self._write_log({"frame_index": evicted[0].index, "stage_latencies_ms": {},
                                         "end_to_end_ms": None, "label": None, "confidence": None,
                                         "stable_label": None, "dropped": True})
            except Exception as exc:
                failure["error"] = f"{type(exc).__name__}: {exc}"
                log.error("source failed: %s", failure["error"])
            finally:
                ingest.close()

        probe = MemoryProbe().start()
        t_start = time.perf_counter()
        feeder = threading.Thread(target=feed, name="frame-source", daemon=True)
        feeder.start()
        executor = self._make_executor()
        inflight: deque = deque()

        def retire():
            (frame, arrival, _), fut = inflight.popleft()
            try:
                res = fut.result()
            except Exception as exc:
                res = InferResult(error=f"{type(exc).__name__}: {exc}")
            self._egress(frame, res, arrival)

        try:
            while True:
                item = ingest.get()
                if item is _Ingest.END:
                    break
                frame, _, gated = item
                if gated:
                    fut: Future = Future()
                    fut.set_result(InferResult(gated=True))
                elif executor is None:
                    fut = Future()
                    fut.set_result(self._infer(frame))
                elif cfg.executor == "process":
                    fut = executor.submit(_infer_in_worker, frame)
                else:
                    fut = executor.submit(self._infer, frame)
                inflight.append((item, fut))
                while inflight and (len(inflight) >= cfg.workers or inflight[0][1].done()):
                    retire()
            while inflight:
                retire()
        finally:
            if executor is not None:
                executor.shutdown(wait=True)
            feeder.join()
        elapsed = time.perf_counter() - t_start
        peak = probe.stop()

        telemetry = None
        if self.batcher is not None:
            if self.pump_telemetry:
                self.batcher.drain(self._last_ts)
            telemetry = self.batcher.stats()
        if self._log_fh is not None:
            self._log_fh.flush()

        stage = {s: st for s, st in ((s, maybe_stats(v)) for s, v in self._stage_samples.items()) if st}
        return RunReport(
            frames_in=counts["in"],
            frames_processed=self._processed,
            frames_dropped=counts["dropped"],
            frames_skipped=counts["skipped"],
            frames_gated=self._gated,
            frames_failed=self._failed,
            stage_latency=stage,
            end_to_end=maybe_stats(self._e2e),
            achieved_fps=self._processed / elapsed if elapsed > 0 else 0.0,
            peak_memory_mb=peak,
            budget_violations=sum(1 for e in self._e2e if e > cfg.latency_budget_ms),
            latency_budget_ms=cfg.latency_budget_ms,
            alerts=list(self.alerts),
            counters={t.id: dict(t.filter.state.cumulative_ms) for t in self.tracks.all_tracks()},
            accuracy=dict(self._acc),
            telemetry=telemetry,
            incomplete="error" in failure,
            error=failure.get("error"),
            wall_time_s=elapsed,
            end_to_end_samples=list(self._e2e),
        )

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        close = getattr(self.backend, "close", None)
        if close is not None:
            close()


def process_frame(frame: Frame, ctx: Pipeline) -> AnnotatedFrame:
    return ctx.process_frame(frame)


def run(source: Iterable[Frame], cfg: PipelineConfig, **kwargs) -> RunReport:
    pipe = Pipeline(cfg, **kwargs)
    try:
        return pipe.run(source)
    finally:
        pipe.close()


def parallel_speedup_probe(cfg: PipelineConfig, workers_list, source_factory: Callable[[], Iterable[Frame]],
                           executor: str = "process") -> dict:
    """Achieved fps per worker count on identical streams."""
    out = {}
    for w in workers_list:
        c = replace(cfg, workers=w, executor=executor, mode="fast")
        out[w] = run(source_factory(), c).achieved_fps
    return out
