"""Frame sources: scripted synthetic scenarios, PPM image sequences, pacing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import EmptyDirectory, ParseError, UnsupportedFormat, ValidationError

MIN_SIDE = 16
DEFAULT_RESOLUTION = (640, 480)

# Label alphabet for scenario timelines; "absent" renders no marker.
KNOWN_LABELS = ("sleep", "awake", "crying", "normal")
ABSENT = "absent"

# Marker intensity per label. Background noise stays below BACKGROUND_MAX.
MARKER_BANDS = {"sleep": 96, "awake": 128, "crying": 176, "normal": 224}
BACKGROUND_MAX = 48
JITTER_LEVELS = 3


@dataclass(frozen=True)
class Resolution:
    width: int
    height: int

    def __post_init__(self):
        if self.width < MIN_SIDE or self.height < MIN_SIDE:
            raise ValidationError(
                f"resolution {self.width}x{self.height} below {MIN_SIDE}px minimum"
            )

    @property
    def area(self) -> int:
        return self.width * self.height

    @classmethod
    def parse(cls, text: str) -> "Resolution":
        """Accept ``WxH`` or the shorthands ``720p``, ``480p``, ``360p``."""
        named = {"720p": (1280, 720), "480p": (854, 480), "360p": (640, 360)}
        key = text.strip().lower()
        if key in named:
            return cls(*named[key])
        try:
            w, h = key.split("x")
            return cls(int(w), int(h))
        except ValueError:
            raise ValidationError(f"cannot parse resolution {text!r}") from None

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int

    def inside(self, res: Resolution) -> bool:
        return (
            self.x >= 0
            and self.y >= 0
            and self.w > 0
            and self.h > 0
            and self.x + self.w <= res.width
            and self.y + self.h <= res.height
        )


@dataclass
class Frame:
    index: int
    timestamp_ms: float
    resolution: Resolution
    pixels: np.ndarray  # (height, width, 3) uint8
    channel_order: str = "BGR"
    ground_truth: Optional[str] = None

    def __post_init__(self):
        if self.channel_order not in ("BGR", "RGB"):
            raise ValidationError(f"unknown channel order {self.channel_order!r}")
        expected = (self.resolution.height, self.resolution.width, 3)
        if self.pixels.shape != expected or self.pixels.dtype != np.uint8:
            raise ValidationError(
                f"pixel buffer {self.pixels.shape}/{self.pixels.dtype} does not match {expected}/uint8"
            )


@dataclass(frozen=True)
class Segment:
    start_ms: float
    end_ms: float
    label: str
    region: Region


@dataclass(frozen=True)
class ScenarioScript:
    fps: float
    resolution: Resolution
    timeline: tuple[Segment, ...]
    noise_seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        prev_end = None
        for seg in self.timeline:
            if seg.label not in KNOWN_LABELS and seg.label != ABSENT:
                raise ValidationError(f"unknown label {seg.label!r}")
            if seg.end_ms <= seg.start_ms:
                raise ValidationError(f"segment {seg.label!r} has non-positive duration")
            if prev_end is not None and seg.start_ms < prev_end:
                raise ValidationError(
                    f"segment {seg.label!r} at {seg.start_ms} ms overlaps the previous segment"
                )
            if not seg.region.inside(self.resolution):
                raise ValidationError(f"region {seg.region} outside {self.resolution}")
            prev_end = seg.end_ms

    @property
    def frame_period_ms(self) -> float:
        return 1000.0 / self.fps

    @property
    def duration_ms(self) -> float:
        return self.timeline[-1].end_ms if self.timeline else 0.0

    @property
    def frame_count(self) -> int:
        return int(np.ceil(self.duration_ms * self.fps / 1000.0 - 1e-9))

    def segment_at(self, t_ms: float) -> Optional[Segment]:
        for seg in self.timeline:
            if seg.start_ms <= t_ms < seg.end_ms:
                return seg
        return None


def _require(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise ParseError(f"{where}: missing field {key!r}") from None


def parse_scenario(doc: dict, name: str = "") -> ScenarioScript:
    """Build a validated script from the decoded JSON document.

    Segments may carry ``end_ms``; without it a segment runs until the next
    segment starts. The last segment must state ``end_ms``.
    """
    if not isinstance(doc, dict):
        raise ParseError("scenario root must be an object")
    try:
        fps = float(_require(doc, "fps", "scenario"))
        width = int(doc.get("width", DEFAULT_RESOLUTION[0]))
        height = int(doc.get("height", DEFAULT_RESOLUTION[1]))
        seed = int(doc.get("noise_seed", 0))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"scenario: {exc}") from None
    raw = _require(doc, "timeline", "scenario")
    if not isinstance(raw, list):
        raise ParseError("timeline must be a list")

    res = Resolution(width, height)
    segments = []
    for i, item in enumerate(raw):
        where = f"timeline[{i}]"
        reg = _require(item, "region", where)
        try:
            start = float(_require(item, "start_ms", where))
            region = Region(*(int(_require(reg, k, where + ".region")) for k in "xywh"))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc}") from None
        if "end_ms" in item:
            end = float(item["end_ms"])
        elif i + 1 < len(raw):
            end = float(_require(raw[i + 1], "start_ms", f"timeline[{i + 1}]"))
        else:
            raise ParseError(f"{where}: last segment needs end_ms")
        label = _require(item, "label", where)
        segments.append(Segment(start, end, str(label), region))

    if any(b.start_ms < a.start_ms for a, b in zip(segments, segments[1:])):
        raise ValidationError("timeline segments must be sorted by start_ms")
    return ScenarioScript(fps, res, tuple(segments), seed, name)


def bundled_scenario_path(name: str) -> Path:
    return Path(__file__).parent / "data" / "scenarios" / name


def load_scenario(path) -> ScenarioScript:
    """Load a scenario JSON file; bare names fall back to the bundled fixtures."""
    p = Path(path)
    if not p.exists() and bundled_scenario_path(p.name).exists():
        p = bundled_scenario_path(p.name)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"scenario file not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    return parse_scenario(doc, name=p.stem)


@lru_cache(maxsize=8)
def _background(seed: int, width: int, height: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    bg = rng.integers(0, BACKGROUND_MAX - JITTER_LEVELS + 1, size=(height, width, 3), dtype=np.uint8)
    bg.flags.writeable = False
    return bg


def synth_next_frame(script: ScenarioScript, index: int) -> Frame:
    """Render frame ``index`` of a scenario. Pure in (script, index).

    The background is a fixed noise field from the script seed plus small
    per-frame sensor jitter; the active segment draws a uniform marker whose
    intensity identifies its label.
    """
    if index < 0:
        raise ValueError("index must be >= 0")
    res = script.resolution
    t_ms = index * (1000.0 / script.fps)
    jitter = np.random.default_rng((script.noise_seed, index)).integers(
        0, JITTER_LEVELS, size=(res.height, res.width, 3), dtype=np.uint8
    )
    pixels = _background(script.noise_seed, res.width, res.height) + jitter
    seg = script.segment_at(t_ms)
    truth = ABSENT
    if seg is not None and seg.label != ABSENT:
        r = seg.region
        band = MARKER_BANDS[seg.label]
        pixels[r.y : r.y + r.h, r.x : r.x + r.w] = band + jitter[r.y : r.y + r.h, r.x : r.x + r.w]
        truth = seg.label
    return Frame(index, t_ms, res, pixels, "BGR", truth)


def synth_stream(script: ScenarioScript, count: Optional[int] = None) -> Iterator[Frame]:
    n = script.frame_count if count is None else count
    for i in range(n):
        yield synth_next_frame(script, i)


def read_ppm(path) -> np.ndarray:
    """Decode a binary (P6) PPM with maxval 255 into an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnsupportedFormat(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise UnsupportedFormat(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise UnsupportedFormat(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace before raster
    raster = data[pos : pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise UnsupportedFormat(f"{path}: raster shorter than header promises")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_image_sequence(directory, fps: float) -> Iterator[Frame]:
    """Stream ``*.ppm`` files in lexicographic order as RGB frames.

    Directory problems are raised here, before the first frame is pulled.
    """
    if not fps > 0:
        raise ValueError("fps must be positive")
    d = Path(directory)
    if not d.is_dir():
        raise EmptyDirectory(f"{directory} is not a directory")
    files = sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise EmptyDirectory(f"no images in {directory}")
    bad = [p.name for p in files if p.suffix.lower() != ".ppm"]
    if bad:
        raise UnsupportedFormat(f"unsupported files in {directory}: {', '.join(bad[:3])}")

    def gen():
        period = 1000.0 / fps
        for i, p in enumerate(files):
            pixels = read_ppm(p)
            res = Resolution(pixels.shape[1], pixels.shape[0])
            yield Frame(i, i * period, res, pixels, "RGB", None)

    return gen()


def pace(stream: Iterable[Frame], fps: float, mode: str = "realtime", clock=time.monotonic,
         sleep=time.sleep) -> Iterator[Frame]:
    """Deliver frames no faster than ``fps``.

    Realtime mode guarantees every inter-delivery gap is at least one frame
    period; fast mode passes frames straight through with logical timestamps.
    """
    if not fps > 0:
        raise ValueError("fps must be positive")
    if mode not in ("realtime", "fast"):
        raise ValueError(f"unknown pacing mode {mode!r}")
    if mode == "fast":
        yield from stream
        return
    period = 1.0 / fps
    last = None
    for frame in stream:
        if last is not None:
            due = last + period
            while True:
                remaining = due - clock()
                if remaining <= 0:
                    break
                sleep(remaining)
        last = clock()
        yield frame


@dataclass
class Timeline:
    """Convenience builder for scenario timelines in scripts and tests."""

    fps: float = 25.0
    resolution: Resolution = field(default_factory=lambda: Resolution(*DEFAULT_RESOLUTION))
    noise_seed: int = 0
    segments: list = field(default_factory=list)

    def add(self, label: str, duration_ms: float, region: Region) -> "Timeline":
        start = self.segments[-1].end_ms if self.segments else 0.0
        self.segments.append(Segment(start, start + duration_ms, label, region))
        return self

    def build(self, name: str = "") -> ScenarioScript:
        return ScenarioScript(self.fps, self.resolution, tuple(self.segments), self.noise_seed, name)
