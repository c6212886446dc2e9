"""Latency summary statistics and a sampling peak-memory probe."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import psutil


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    std_ms: float  # sample standard deviation (n - 1); 0 when n == 1
    min_ms: float
    max_ms: float
    n: int

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "LatencyStats":
        xs = [float(x) for x in samples]
        n = len(xs)
        if n == 0:
            raise ValueError("no samples")
        mean = math.fsum(xs) / n
        var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1) if n > 1 else 0.0
        lo, hi = min(xs), max(xs)
        # fsum keeps mean inside [min, max]; clamp guards the last ulp.
        return cls(min(max(mean, lo), hi), math.sqrt(var), lo, hi, n)

    def as_dict(self) -> dict:
        return {"mean_ms": self.mean_ms, "std_ms": self.std_ms, "min_ms": self.min_ms,
                "max_ms": self.max_ms, "n": self.n}


def maybe_stats(samples: Sequence[float]) -> Optional[LatencyStats]:
    return LatencyStats.from_samples(samples) if samples else None


class MemoryProbe:
    """Samples process RSS on a background thread.

    ``peak_increment_mb`` is the largest RSS observed during the probe's
    lifetime minus the RSS at start.
    """

    def __init__(self, hz: float = 20.0):
        if hz < 10:
            raise ValueError("sampling rate must be at least 10 Hz")
        self.interval = 1.0 / hz
        self._proc = psutil.Process()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.baseline_mb = 0.0
        self.peak_mb = 0.0
        self.samples = 0

    def _rss_mb(self) -> float:
        return self._proc.memory_info().rss / (1024 * 1024)

    def _loop(self):
        while not self._stop.wait(self.interval):
            self._sample()

    def _sample(self):
        self.peak_mb = max(self.peak_mb, self._rss_mb())
        self.samples += 1

    def start(self) -> "MemoryProbe":
        self.baseline_mb = self._rss_mb()
        self.peak_mb = self.baseline_mb
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="memory-probe", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> float:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._sample()
        return self.peak_increment_mb

    @property
    def peak_increment_mb(self) -> float:
        return max(0.0, self.peak_mb - self.baseline_mb)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
