"""Classifier backends, Platt calibration and per-ROI prediction."""

from __future__ import annotations

import hashlib
import json
import math
import os
import shlex
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import optimize, stats

from .detect import BoundingBox, RoiTensor
from .errors import BackendFailure, ConfigError, DegenerateData, NonFinite


@dataclass(frozen=True)
class TaskSpec:
    name: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels or len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"task {self.name!r} needs unique, non-empty labels")

    def index(self, label: str) -> int:
        return self.labels.index(label)


TASKS = {
    "sleep_awake": TaskSpec("sleep_awake", ("sleep", "awake")),
    "cry_normal": TaskSpec("cry_normal", ("crying", "normal")),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


@dataclass(frozen=True)
class RawScores:
    values: tuple[float, ...]
    kind: str = "logits"  # or "probs"

    def __post_init__(self):
        if self.kind not in ("logits", "probs"):
            raise ValueError(f"unknown score kind {self.kind!r}")
        if self.kind == "probs":
            if any(v < 0 or v > 1 for v in self.values) or abs(sum(self.values) - 1) > 1e-6:
                raise ValueError(f"probabilities {self.values} do not form a distribution")


@dataclass(frozen=True)
class PlattParams:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise NonFinite(f"Platt parameters must be finite, got a={self.a}, b={self.b}")

    @classmethod
    def load(cls, path, task: Optional[str] = None) -> "PlattParams":
        doc = json.loads(Path(path).read_text())
        if task is not None and doc.get("task") not in (None, task):
            raise ConfigError(f"calibration file is for task {doc.get('task')!r}, not {task!r}")
        return cls(float(doc["a"]), float(doc["b"]))

    def save(self, path, task: str) -> None:
        Path(path).write_text(json.dumps({"task": task, "a": self.a, "b": self.b}) + "\n")


@dataclass
class Prediction:
    label: str
    confidence: float
    raw: RawScores
    calibrated: tuple[float, ...]
    frame_index: int
    box: BoundingBox
    latency_ms: float
    timestamp_ms: float = 0.0


@dataclass(frozen=True)
class BackendProfile:
    name: str
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    working_set_mb: float
    stored_size_mb: float
    # Source strings exactly as published, for verbatim report rows.
    text: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.min_ms <= self.mean_ms <= self.max_ms:
            raise ConfigError(f"{self.name}: need min <= mean <= max")
        if self.std_ms < 0:
            raise ConfigError(f"{self.name}: negative std")
        if self.working_set_mb <= 0 or self.stored_size_mb <= 0:
            raise ConfigError(f"{self.name}: sizes must be positive")

    def formatted(self, key: str) -> str:
        return self.text.get(key, repr(getattr(self, key)))


PROFILE_FIELDS = ("mean_ms", "std_ms", "min_ms", "max_ms", "working_set_mb", "stored_size_mb")


def bundled_profiles_path() -> Path:
    return Path(__file__).parent / "data" / "profiles.json"


def profile_from_dict(d: dict) -> BackendProfile:
    try:
        values = {k: float(d[k]) for k in PROFILE_FIELDS}
        return BackendProfile(str(d["name"]), **values, text={k: str(d[k]) for k in PROFILE_FIELDS})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad profile entry {d!r}: {exc}") from None


def load_profiles(path=None) -> list[BackendProfile]:
    p = Path(path) if path else bundled_profiles_path()
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read profiles {p}: {exc}") from None
    entries = doc.get("profiles") if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{p}: no profiles")
    return [profile_from_dict(e) for e in entries]


def find_profile(name: str, path=None) -> BackendProfile:
    for prof in load_profiles(path):
        if prof.name.lower() == name.lower():
            return prof
    raise ConfigError(f"no profile named {name!r}")


def apply_quantization(profile: BackendProfile, size_reduction: float = 0.60,
                       latency_reduction: float = 0.22) -> BackendProfile:
    """Model FP16 conversion as proportional size and latency cuts."""
    k = 1.0 - latency_reduction
    return BackendProfile(
        f"{profile.name}-fp16",
        profile.mean_ms * k, profile.std_ms * k, profile.min_ms * k, profile.max_ms * k,
        profile.working_set_mb, profile.stored_size_mb * (1.0 - size_reduction),
    )


# --- calibration -----------------------------------------------------------

def platt_apply(z: float, p: PlattParams) -> float:
    s = p.a * z + p.b
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def platt_nll(a: float, b: float, z: np.ndarray, y: np.ndarray) -> float:
    s = a * z + b
    return float(np.sum(np.logaddexp(0.0, s) - y * s))


def platt_fit(pairs: Sequence[tuple[float, int]], max_iter: int = 100,
              tol: float = 1e-8) -> PlattParams:
    """Maximum-likelihood (a, b) for ``sigmoid(a*z + b)`` by damped Newton.

    Steps are halved until the negative log-likelihood decreases. On
    separable data the optimum is at infinity, so the iteration cap is what
    stops it.
    """
    if len(pairs) < 2:
        raise DegenerateData("need at least two (logit, label) pairs")
    z = np.array([float(p[0]) for p in pairs])
    y = np.array([float(p[1]) for p in pairs])
    if not np.all(np.isfinite(z)):
        raise NonFinite("logits must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DegenerateData("both classes must be present")

    theta = np.zeros(2)
    f = platt_nll(*theta, z, y)
    for _ in range(max_iter):
        s = theta[0] * z + theta[1]
        p = 0.5 * (1.0 + np.tanh(0.5 * s))
        r = p - y
        g = np.array([r @ z, r.sum()])
        if np.linalg.norm(g) < tol:
            break
        w = p * (1.0 - p)
        H = np.array([[w @ (z * z), w @ z], [w @ z, w.sum()]])
        H += np.eye(2) * 1e-12 * max(1.0, np.trace(H))
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        if not np.all(np.isfinite(step)) or step @ g <= 0:
            step = g
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            fc = platt_nll(*cand, z, y)
            if fc <= f - 1e-4 * t * (step @ g):
                break
            t *= 0.5
        else:
            break
        theta, f = cand, fc

    if not np.all(np.isfinite(theta)):
        raise NonFinite("fit diverged")
    return PlattParams(float(theta[0]), float(theta[1]))


def positive_logit(raw: RawScores) -> float:
    """Log-odds of the second label against the first."""
    v = raw.values
    if raw.kind == "logits":
        return float(v[1] - v[0])
    eps = 1e-12
    return float(math.log(max(v[1], eps)) - math.log(max(v[0], eps)))


def calibrate(raw: RawScores, params: PlattParams) -> tuple[float, ...]:
    if len(raw.values) == 2:
        p = platt_apply(positive_logit(raw), params)
        return (1.0 - p, p)
    # Multi-class fallback: softmax of logits, probabilities pass through.
    v = np.asarray(raw.values, dtype=float)
    if raw.kind == "probs":
        return tuple(float(x) for x in v)
    e = np.exp(v - v.max())
    return tuple(float(x) for x in e / e.sum())


def argmax_first(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


# --- backends --------------------------------------------------------------

class Backend(Protocol):
    name: str
    concurrent_safe: bool

    def predict(self, roi: RoiTensor, task: TaskSpec) -> RawScores: ...


LOGIT_MARGIN = 4.0


def _label_logits(task: TaskSpec, label: str) -> RawScores:
    k = task.index(label)
    return RawScores(tuple(LOGIT_MARGIN if i == k else -LOGIT_MARGIN for i in range(len(task.labels))))


class OracleBackend:
    """Reads the ROI's ground truth and flips it with probability ``noise``.

    Flip decisions are keyed on (seed, frame index, box origin) so results do
    not depend on call order or worker count.
    """

    concurrent_safe = True

    def __init__(self, noise: float = 0.0, seed: int = 0):
        if not 0.0 <= noise <= 1.0:
            raise ConfigError(f"oracle noise must be in [0, 1], got {noise}")
        self.noise = noise
        self.seed = seed
        self.name = "oracle"

    def predict(self, roi: RoiTensor, task: TaskSpec) -> RawScores:
        truth = roi.ground_truth
        if truth not in task.labels:
            raise BackendFailure(self.name, f"ground truth {truth!r} not in task {task.name}")
        if self.noise > 0:
            rng = np.random.default_rng((self.seed, roi.frame_index, roi.source_box.x, roi.source_box.y))
            if rng.random() < self.noise:
                others = [lab for lab in task.labels if lab != truth]
                truth = others[int(rng.integers(len(others)))]
        return _label_logits(task, truth)


def clamped_normal_moments(loc: float, scale: float, lo: float, hi: float) -> tuple[float, float]:
    """Mean and std of ``clip(N(loc, scale), lo, hi)`` in closed form."""
    a, b = (lo - loc) / scale, (hi - loc) / scale
    Fa, Fb = stats.norm.cdf(a), stats.norm.cdf(b)
    fa, fb = stats.norm.pdf(a), stats.norm.pdf(b)
    mid = Fb - Fa
    m1 = lo * Fa + hi * (1 - Fb) + loc * mid + scale * (fa - fb)
    inner2 = loc**2 * mid + 2 * loc * scale * (fa - fb) + scale**2 * (mid + a * fa - b * fb)
    m2 = lo**2 * Fa + hi**2 * (1 - Fb) + inner2
    return float(m1), float(math.sqrt(max(m2 - m1 * m1, 0.0)))


def fit_clamped_normal(mean: float, std: float, lo: float, hi: float) -> tuple[float, float]:
    """Location and scale whose clamped distribution has the given mean and std.

    Falls back to (mean, std) when no better fit exists (e.g. std == 0).
    """
    if std <= 0 or hi <= lo:
        return mean, max(std, 0.0)

    def resid(p):
        m, s = clamped_normal_moments(p[0], math.exp(p[1]), lo, hi)
        return [(m - mean) / std, (s - std) / std]

    best = (mean, std)
    best_err = float(np.hypot(*resid([mean, math.log(std)])))
    for start_scale in (1.0, 3.0, 10.0):
        sol = optimize.least_squares(resid, [mean, math.log(std * start_scale)], xtol=1e-12, ftol=1e-12)
        err = float(np.hypot(*sol.fun))
        if err < best_err:
            best, best_err = (float(sol.x[0]), float(math.exp(sol.x[1]))), err
    return best


# Final stretch of a sleep-mode wait is spun to absorb sleep overshoot.
SPIN_MARGIN_S = 0.0015


def wait_ms(duration_ms: float, busy: bool) -> None:
    """Hold the caller for ``duration_ms``.

    Sleep mode sleeps most of the interval and spins the rest on the wall
    clock. Busy mode spins until the calling thread has consumed that much
    CPU time, so it behaves like compute-bound inference: concurrent busy
    waits only overlap when there are free cores.
    """
    if busy:
        end = time.thread_time() + duration_ms / 1000.0
        while time.thread_time() < end:
            pass
        return
    end = time.perf_counter() + duration_ms / 1000.0
    coarse = duration_ms / 1000.0 - SPIN_MARGIN_S
    if coarse > 0:
        time.sleep(coarse)
    while time.perf_counter() < end:
        pass


class LatencyModelBackend:
    """Reproduces a profile's timing distribution without running a model.

    Latencies come from a clamped normal on [min_ms, max_ms] whose location
    and scale are fitted so the clamped draws keep the profile's mean and
    std. ``labels`` picks the emitted label: ``ground_truth`` (fallback to the
    first label), ``first``, or ``fixed:<label>``.
    """

    concurrent_safe = True

    def __init__(self, profile: BackendProfile, labels: str = "ground_truth", seed: int = 0,
                 wait: str = "sleep"):
        if wait not in ("sleep", "busy"):
            raise ConfigError(f"wait must be 'sleep' or 'busy', got {wait!r}")
        if not (labels in ("ground_truth", "first") or labels.startswith("fixed:")):
            raise ConfigError(f"unknown label strategy {labels!r}")
        self.profile = profile
        self.labels = labels
        self.seed = seed
        self.busy = wait == "busy"
        self.name = f"latency_model:{profile.name}"
        self.loc, self.scale = fit_clamped_normal(profile.mean_ms, profile.std_ms, profile.min_ms, profile.max_ms)
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def draw_ms(self) -> float:
        with self._lock:
            x = self._rng.normal(self.loc, self.scale) if self.scale > 0 else self.loc
        return float(min(max(x, self.profile.min_ms), self.profile.max_ms))

    def predict(self, roi: RoiTensor, task: TaskSpec) -> RawScores:
        wait_ms(self.draw_ms(), self.busy)
        if self.labels.startswith("fixed:"):
            label = self.labels.split(":", 1)[1]
        elif self.labels == "ground_truth" and roi.ground_truth in task.labels:
            label = roi.ground_truth
        else:
            label = task.labels[0]
        if label not in task.labels:
            raise BackendFailure(self.name, f"label {label!r} not in task {task.name}")
        return _label_logits(task, label)


class ExternalBackend:
    """Line-oriented child-process backend.

    Each request is one JSON line ``{"frame_index", "task", "roi_digest",
    "tensor_path"}``; the ROI is written beforehand as raw float32 bytes
    (256x256x3, C order) to ``tensor_path``. The child answers with a JSON
    array of per-label scores on one line.
    """

    concurrent_safe = False

    def __init__(self, command, scores: str = "logits", workdir: Optional[str] = None):
        if not command:
            raise ConfigError("external backend needs a command")
        if scores not in ("logits", "probs"):
            raise ConfigError(f"scores must be 'logits' or 'probs', got {scores!r}")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.scores = scores
        self.name = f"external:{Path(self.command[0]).name}"
        self._tmpdir = tempfile.mkdtemp(prefix="cribwatch-roi-", dir=workdir)
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise ConfigError(f"cannot start {self.command[0]}: {exc}") from None

    def predict(self, roi: RoiTensor, task: TaskSpec) -> RawScores:
        blob = np.ascontiguousarray(roi.data, dtype=np.float32).tobytes()
        digest = hashlib.sha256(blob).hexdigest()
        with self._lock:
            path = os.path.join(self._tmpdir, f"roi-{roi.frame_index}.f32")
            with open(path, "wb") as fh:
                fh.write(blob)
            request = {"frame_index": roi.frame_index, "task": task.name, "roi_digest": digest,
                       "tensor_path": path}
            try:
                self._proc.stdin.write(json.dumps(request) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise BackendFailure(self.name, f"pipe error: {exc}") from None
            finally:
                os.unlink(path)
        if not line:
            raise BackendFailure(self.name, "child process closed its output")
        try:
            values = tuple(float(v) for v in json.loads(line))
        except (json.JSONDecodeError, TypeError, ValueError):
            raise BackendFailure(self.name, f"malformed response {line.strip()!r}") from None
        if len(values) != len(task.labels):
            raise BackendFailure(self.name, f"expected {len(task.labels)} scores, got {len(values)}")
        try:
            return RawScores(values, self.scores)
        except ValueError as exc:
            raise BackendFailure(self.name, str(exc)) from None

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        try:
            os.rmdir(self._tmpdir)
        except OSError:
            pass


def make_backend(kind: str, config: Optional[dict] = None):
    """Build a backend from a kind name and a plain config mapping."""
    cfg = dict(config or {})
    try:
        if kind == "oracle":
            return OracleBackend(float(cfg.get("noise", 0.0)), int(cfg.get("seed", 0)))
        if kind == "latency_model":
            prof = cfg.get("profile")
            if isinstance(prof, BackendProfile):
                profile = prof
            elif isinstance(prof, dict):
                profile = profile_from_dict(prof)
            elif isinstance(prof, str):
                profile = find_profile(prof, cfg.get("profiles_path"))
            else:
                raise ConfigError("latency_model backend needs a profile")
            return LatencyModelBackend(profile, str(cfg.get("labels", "ground_truth")),
                                       int(cfg.get("seed", 0)), str(cfg.get("wait", "sleep")))
        if kind == "external":
            return ExternalBackend(cfg.get("command"), str(cfg.get("scores", "logits")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {kind} backend config: {exc}") from None
    raise ConfigError(f"unknown backend kind {kind!r}")


def classify(backend, roi: RoiTensor, task: TaskSpec,
             params: PlattParams = PlattParams()) -> Prediction:
    t0 = time.perf_counter()
    try:
        raw = backend.predict(roi, task)
    except BackendFailure:
        raise
    except Exception as exc:
        raise BackendFailure(getattr(backend, "name", type(backend).__name__), repr(exc)) from exc
    latency_ms = (time.perf_counter() - t0) * 1000.0
    if len(raw.values) != len(task.labels):
        raise BackendFailure(backend.name, "score vector length does not match task labels")
    cal = calibrate(raw, params)
    k = argmax_first(cal)
    return Prediction(task.labels[k], cal[k], raw, cal, roi.frame_index, roi.source_box, latency_ms)
