"""Sliding-window smoothing, behaviour-duration counters and sustained-event alerts."""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .classify import Prediction
from .detect import BoundingBox
from .errors import ConfigError, OutOfOrderFrame

UNKNOWN = "unknown"


@dataclass(frozen=True)
class FilterConfig:
    window_frames: int = 5
    fps: float = 25.0
    decision: str = "majority"  # or "mean_confidence"

    def __post_init__(self):
        if self.window_frames < 1 or self.window_frames % 2 == 0:
            raise ConfigError(f"window_frames must be odd and >= 1, got {self.window_frames}")
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        if self.decision not in ("majority", "mean_confidence"):
            raise ConfigError(f"unknown decision rule {self.decision!r}")

    @property
    def frame_ms(self) -> float:
        return 1000.0 / self.fps


@dataclass
class StableState:
    label: str = UNKNOWN
    since_ms: Optional[float] = None
    cumulative_ms: dict = field(default_factory=dict)

    def copy(self) -> "StableState":
        return StableState(self.label, self.since_ms, dict(self.cumulative_ms))

    def as_dict(self) -> dict:
        return {"label": self.label, "since_ms": self.since_ms, "cumulative_ms": dict(self.cumulative_ms)}


def window_decision(window: Sequence[Prediction], labels: Sequence[str], rule: str) -> Optional[str]:
    """Label chosen by ``rule`` over ``window``, or None on a tie."""
    if not window:
        return None
    if rule == "majority":
        counts = Counter(p.label for p in window)
        top = max(counts.values())
        winners = [lab for lab, c in counts.items() if c == top]
    else:
        sums = [0.0] * len(labels)
        for p in window:
            for i, c in enumerate(p.calibrated):
                sums[i] += c
        top = max(sums)
        winners = [labels[i] for i, s in enumerate(sums) if s == top]
    return winners[0] if len(winners) == 1 else None


class SlidingFilter:
    """Streaming filter state for one face track.

    Ties keep the current stable label. Durations accrue one frame interval
    per update, but only while the stable label is unchanged from the
    previous update.
    """

    def __init__(self, cfg: FilterConfig, labels: Sequence[str]):
        self.cfg = cfg
        self.labels = tuple(labels)
        self.window: deque = deque(maxlen=cfg.window_frames)
        self.state = StableState(cumulative_ms={lab: 0.0 for lab in self.labels})
        self.last_index: Optional[int] = None
        self.last_prediction: Optional[Prediction] = None

    def update(self, pred: Prediction) -> StableState:
        if self.last_index is not None and pred.frame_index <= self.last_index:
            raise OutOfOrderFrame(f"frame {pred.frame_index} after {self.last_index}")
        self.window.append(pred)
        decision = window_decision(self.window, self.labels, self.cfg.decision)
        st = self.state
        if decision is not None and decision != st.label:
            st.label = decision
            st.since_ms = pred.timestamp_ms
        elif st.label != UNKNOWN and self.last_index is not None:
            gap = pred.frame_index - self.last_index
            st.cumulative_ms[st.label] = st.cumulative_ms.get(st.label, 0.0) + gap * self.cfg.frame_ms
        self.last_index = pred.frame_index
        self.last_prediction = pred
        return st.copy()


def filter_update(state: SlidingFilter, pred: Prediction, cfg: Optional[FilterConfig] = None) -> StableState:
    if cfg is not None and cfg != state.cfg:
        raise ConfigError("filter state was built with a different FilterConfig")
    return state.update(pred)


def counters_snapshot(state) -> dict:
    st = state.state if isinstance(state, SlidingFilter) else state
    return dict(st.cumulative_ms)


@dataclass(frozen=True)
class AlertRule:
    label: str
    sustain_ms: float = 10000.0
    cooldown_ms: float = 60000.0

    def __post_init__(self):
        if not self.sustain_ms > 0:
            raise ConfigError("sustain_ms must be positive")
        if self.cooldown_ms < 0:
            raise ConfigError("cooldown_ms must be >= 0")


@dataclass(frozen=True)
class Alert:
    rule: AlertRule
    raised_at_ms: float
    episode_start_ms: float
    priority: str = "critical"
    track: int = 0

    def as_dict(self) -> dict:
        return {
            "label": self.rule.label,
            "sustain_ms": self.rule.sustain_ms,
            "cooldown_ms": self.rule.cooldown_ms,
            "raised_at_ms": self.raised_at_ms,
            "episode_start_ms": self.episode_start_ms,
            "priority": self.priority,
            "track": self.track,
        }


@dataclass
class AlertHistory:
    last_alert_ms: dict = field(default_factory=dict)
    alerted_episode: dict = field(default_factory=dict)


def alert_check(state: StableState, rules: Iterable[AlertRule], now_ms: float,
                history: Optional[AlertHistory] = None, track: int = 0) -> list[Alert]:
    """Alerts due at ``now_ms``; each stable episode alerts at most once."""
    hist = history if history is not None else AlertHistory()
    alerts = []
    for rule in rules:
        if state.label != rule.label or state.since_ms is None:
            continue
        if now_ms - state.since_ms < rule.sustain_ms:
            continue
        key = rule
        if hist.alerted_episode.get(key) == state.since_ms:
            continue
        last = hist.last_alert_ms.get(key)
        if last is not None and now_ms - last < rule.cooldown_ms:
            continue
        hist.last_alert_ms[key] = now_ms
        hist.alerted_episode[key] = state.since_ms
        alerts.append(Alert(rule, now_ms, state.since_ms, "critical", track))
    return alerts


@dataclass
class Track:
    id: int
    box: BoundingBox
    filter: SlidingFilter
    history: AlertHistory = field(default_factory=AlertHistory)
    missed: int = 0


class TrackSet:
    """Per-face filters keyed by greedy IoU matching between frames."""

    def __init__(self, cfg: FilterConfig, labels: Sequence[str], iou_threshold: float = 0.3,
                 max_missed: Optional[int] = None):
        self.cfg = cfg
        self.labels = tuple(labels)
        self.iou_threshold = iou_threshold
        self.max_missed = int(cfg.fps) if max_missed is None else max_missed
        self.tracks: list[Track] = []
        self.retired: list[Track] = []
        self._next_id = 0

    def match(self, boxes: Sequence[BoundingBox]) -> list[Track]:
        pairs = sorted(
            ((t.box.iou(b), ti, bi) for ti, t in enumerate(self.tracks) for bi, b in enumerate(boxes)),
            key=lambda p: (-p[0], p[1], p[2]),
        )
        assigned: dict[int, Track] = {}
        used = set()
        for iou, ti, bi in pairs:
            if iou < self.iou_threshold:
                break
            if ti in used or bi in assigned:
                continue
            used.add(ti)
            assigned[bi] = self.tracks[ti]
        for bi, box in enumerate(boxes):
            if bi not in assigned:
                track = Track(self._next_id, box, SlidingFilter(self.cfg, self.labels))
                self._next_id += 1
                self.tracks.append(track)
                assigned[bi] = track
            assigned[bi].box = box
            assigned[bi].missed = 0
        matched = {id(t) for t in assigned.values()}
        for t in self.tracks:
            if id(t) not in matched:
                t.missed += 1
        keep = [t for t in self.tracks if t.missed <= self.max_missed]
        self.retired.extend(t for t in self.tracks if t.missed > self.max_missed)
        self.tracks = keep
        return [assigned[bi] for bi in range(len(boxes))]

    def primary(self) -> Optional[Track]:
        return min(self.tracks, key=lambda t: t.id) if self.tracks else None

    def all_tracks(self) -> list[Track]:
        return sorted(self.retired + self.tracks, key=lambda t: t.id)
