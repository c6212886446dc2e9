"""Backend latency measurement, per-frame cost model and CSV reports."""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .classify import TASKS, BackendProfile, TaskSpec, classify
from .detect import ROI_SIZE, BoundingBox, RoiTensor
from .errors import ConfigError
from .frames import Resolution
from .stats import LatencyStats, MemoryProbe

REFERENCE_RESOLUTION = Resolution(1280, 720)


@dataclass(frozen=True)
class Range:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise ConfigError(f"bad range [{self.lo}, {self.hi}]")

    @property
    def mid(self) -> float:
        return (self.lo + self.hi) / 2

    def __add__(self, other: "Range") -> "Range":
        return Range(self.lo + other.lo, self.hi + other.hi)

    def __mul__(self, k: float) -> "Range":
        return Range(self.lo * k, self.hi * k)

    __rmul__ = __mul__

    def __truediv__(self, k: float) -> "Range":
        return Range(self.lo / k, self.hi / k)


ZERO = Range(0.0, 0.0)


@dataclass(frozen=True)
class CostModel:
    t_read_ms: Range
    t_face_ms: Range
    t_pose_ms: Range
    t_infer_ms_per_face: Range
    t_init_ms: Range
    t_network_ms: Range
    reference_resolution: Resolution = REFERENCE_RESOLUTION
    # Resolution the face/pose ranges currently describe.
    resolution: Optional[Resolution] = None

    @property
    def current_resolution(self) -> Resolution:
        return self.resolution or self.reference_resolution


_STAGE_KEYS = {
    "frame_read": "t_read_ms",
    "face_detection": "t_face_ms",
    "pose_detection": "t_pose_ms",
    "inference_per_face": "t_infer_ms_per_face",
    "model_init": "t_init_ms",
    "network_update": "t_network_ms",
}


def bundled_cost_model_path() -> Path:
    return Path(__file__).parent / "data" / "cost_model.json"


def load_cost_model(path=None) -> CostModel:
    p = Path(path) if path else bundled_cost_model_path()
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
        stages = doc["stages_ms"]
        kwargs = {attr: Range(*map(float, stages[key])) for key, attr in _STAGE_KEYS.items()}
        ref = doc.get("reference_resolution", {"width": 1280, "height": 720})
        return CostModel(**kwargs, reference_resolution=Resolution(int(ref["width"]), int(ref["height"])))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot load cost model {p}: {exc}") from None


def scale_cost(model: CostModel, resolution: Resolution) -> CostModel:
    """Rescale the pixel-proportional stages (face, pose) to ``resolution``."""
    k = resolution.area / model.current_resolution.area
    if k == 1:
        return replace(model, resolution=resolution)
    return replace(model, t_face_ms=model.t_face_ms * k, t_pose_ms=model.t_pose_ms * k,
                   resolution=resolution)


@dataclass(frozen=True)
class FeasibilityResult:
    per_frame_ms: Range
    max_faces: int
    target_fps: float
    include_pose: bool
    skip: int
    resolution: Resolution
    budget_ms: float
    feasible_lo: bool
    feasible_mid: bool
    feasible_hi: bool
    limiting_stage: str
    stage_mid_ms: dict = field(default_factory=dict)

    @property
    def midpoint_ms(self) -> float:
        return self.per_frame_ms.mid


def feasibility(model: CostModel, faces: int, target_fps: float, include_pose: bool = False,
                skip: int = 1) -> FeasibilityResult:
    """Per-frame cost (read + face + optional pose + faces x inference) against 1000/fps.

    Cost is amortised over ``skip``; init and network stages are left out
    of the frame path.
    """
    if faces < 0 or not target_fps > 0 or skip < 1:
        raise ValueError("need faces >= 0, target_fps > 0, skip >= 1")
    stages = {
        "frame_read": model.t_read_ms,
        "face_detection": model.t_face_ms,
        "pose_detection": model.t_pose_ms if include_pose else ZERO,
        "inference": model.t_infer_ms_per_face * faces,
    }
    total = ZERO
    for r in stages.values():
        total = total + r
    per_frame = total / skip
    budget = 1000.0 / target_fps
    limiting = max(stages, key=lambda s: stages[s].mid)
    return FeasibilityResult(
        per_frame, faces, target_fps, include_pose, skip, model.current_resolution, budget,
        per_frame.lo <= budget, per_frame.mid <= budget, per_frame.hi <= budget, limiting,
        {s: r.mid / skip for s, r in stages.items()},
    )


def feasibility_sweep(model: CostModel, resolutions: Sequence[Resolution], faces: Sequence[int],
                      pose: Sequence[bool], skips: Sequence[int],
                      fps: Sequence[float]) -> list[FeasibilityResult]:
    out = []
    for res, n, p, k, f in itertools.product(resolutions, faces, pose, skips, fps):
        out.append(feasibility(scale_cost(model, res), n, f, p, k))
    return out


FEASIBILITY_COLUMNS = [
    "width", "height", "faces", "include_pose", "skip", "target_fps", "budget_ms",
    "per_frame_lo_ms", "per_frame_mid_ms", "per_frame_hi_ms",
    "feasible_lo", "feasible_mid", "feasible_hi", "limiting_stage",
]


def write_feasibility_csv(path, results: Iterable[FeasibilityResult]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FEASIBILITY_COLUMNS)
        for r in results:
            w.writerow([
                r.resolution.width, r.resolution.height, r.max_faces, r.include_pose, r.skip,
                repr(float(r.target_fps)), repr(r.budget_ms),
                repr(r.per_frame_ms.lo), repr(r.per_frame_ms.mid), repr(r.per_frame_ms.hi),
                r.feasible_lo, r.feasible_mid, r.feasible_hi, r.limiting_stage,
            ])
    return path


# --- measurement -----------------------------------------------------------

@dataclass
class BenchResult:
    name: str
    stats: LatencyStats
    peak_memory_mb: float
    samples: list = field(default_factory=list, repr=False)


def fixture_roi(seed: int = 0, ground_truth: Optional[str] = "crying") -> RoiTensor:
    rng = np.random.default_rng(seed)
    data = rng.random((ROI_SIZE, ROI_SIZE, 3), dtype=np.float32)
    return RoiTensor(data, BoundingBox(0, 0, ROI_SIZE, ROI_SIZE, 1.0), 0, ground_truth)


def measure_backend(backend, roi: Optional[RoiTensor] = None, n: int = 200, warmup: int = 5,
                    task: TaskSpec = TASKS["cry_normal"]) -> BenchResult:
    """Time ``n`` classify calls after ``warmup`` untimed ones, probing RSS throughout."""
    if n < 30:
        raise ValueError(f"need at least 30 timed calls, got {n}")
    if warmup < 1:
        raise ValueError("need at least one warmup call")
    roi = roi if roi is not None else fixture_roi()
    for _ in range(warmup):
        classify(backend, roi, task)
    samples = []
    with MemoryProbe() as probe:
        for _ in range(n):
            t0 = time.perf_counter()
            classify(backend, roi, task)
            samples.append((time.perf_counter() - t0) * 1000.0)
    return BenchResult(getattr(backend, "name", type(backend).__name__),
                       LatencyStats.from_samples(samples), probe.peak_increment_mb, samples)


@dataclass
class BudgetVerdict:
    passed: bool
    mean_ms: float
    violation_rate: float
    budget_ms: float
    reason: str


def end_to_end_budget_check(report, budget_ms: float = 1000.0, max_violation_rate: float = 0.01) -> BudgetVerdict:
    """Pass iff mean end-to-end latency <= budget and under 1 % of frames exceed it."""
    samples = getattr(report, "end_to_end_samples", None) or []
    if samples:
        mean = float(np.mean(samples))
        rate = sum(1 for s in samples if s > budget_ms) / len(samples)
    else:
        e2e = report.end_to_end
        if e2e is None:
            return BudgetVerdict(False, float("nan"), float("nan"), budget_ms, "no processed frames")
        mean = e2e.mean_ms
        rate = report.budget_violations / max(report.frames_processed, 1)
    if mean > budget_ms:
        return BudgetVerdict(False, mean, rate, budget_ms, f"mean {mean:.1f} ms exceeds {budget_ms:g} ms")
    if rate >= max_violation_rate:
        return BudgetVerdict(False, mean, rate, budget_ms, f"violation rate {rate:.2%} >= {max_violation_rate:.0%}")
    return BudgetVerdict(True, mean, rate, budget_ms, "ok")


# --- reports ---------------------------------------------------------------

BENCH_COLUMNS = ["model", "memory_mb", "mean_ms", "std_ms", "min_ms", "max_ms", "size_mb"]
SCATTER_COLUMNS = ["model", "mean_ms", "memory_mb", "size_mb"]


@dataclass
class BenchRow:
    model: str
    memory_mb: str
    mean_ms: str
    std_ms: str
    min_ms: str
    max_ms: str
    size_mb: str

    @classmethod
    def from_profile(cls, p: BackendProfile) -> "BenchRow":
        f = p.formatted
        return cls(p.name, f("working_set_mb"), f("mean_ms"), f("std_ms"), f("min_ms"), f("max_ms"),
                   f("stored_size_mb"))

    @classmethod
    def from_measurement(cls, result: BenchResult, size_mb: float, label: Optional[str] = None) -> "BenchRow":
        s = result.stats
        return cls(label or result.name, repr(result.peak_memory_mb), repr(s.mean_ms), repr(s.std_ms),
                   repr(s.min_ms), repr(s.max_ms), repr(float(size_mb)))


def emit_report(out_dir, rows: Sequence[BenchRow],
                feasibility_results: Optional[Sequence[FeasibilityResult]] = None) -> list[Path]:
    """Write inference_bench.csv, tradeoff_scatter.csv and optionally feasibility.csv."""
    if not rows:
        raise ValueError("no benchmark rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = out / "inference_bench.csv"
    with open(bench, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r.model, r.memory_mb, r.mean_ms, r.std_ms, r.min_ms, r.max_ms, r.size_mb])
    scatter = out / "tradeoff_scatter.csv"
    with open(scatter, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCATTER_COLUMNS)
        for r in rows:
            w.writerow([r.model, r.mean_ms, r.memory_mb, r.size_mb])
    paths = [bench, scatter]
    if feasibility_results is not None:
        paths.append(write_feasibility_csv(out / "feasibility.csv", feasibility_results))
    return paths


def read_bench_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (v if k == "model" else float(v)) for k, v in row.items()} for row in rows]
