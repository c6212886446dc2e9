"""Face localisation, ROI preprocessing and the motion gate."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Protocol

import numpy as np
from scipy import ndimage

from .errors import BoxOutOfBounds, ResolutionMismatch
from .frames import Frame

ROI_SIZE = 256
DEFAULT_MIN_CONFIDENCE = 0.5


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    def inside(self, width: int, height: int) -> bool:
        return (
            self.w > 0
            and self.h > 0
            and self.x >= 0
            and self.y >= 0
            and self.x + self.w <= width
            and self.y + self.h <= height
        )

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        union = self.w * self.h + other.w * other.h - inter
        return inter / union if union else 0.0

    def as_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "confidence": self.confidence}


@dataclass
class RoiTensor:
    data: np.ndarray  # (256, 256, 3) float32 in [0, 1]
    source_box: BoundingBox
    frame_index: int
    # Provenance copied from the frame so reference backends can consult it.
    ground_truth: Optional[str] = None


class Detector(Protocol):
    def detect(self, frame: Frame) -> list[BoundingBox]: ...


class MarkerDetector:
    """Threshold scan for the bright rectangles drawn by synthetic sources.

    Pixels whose channel mean exceeds ``threshold`` are grouped into
    connected components; each component's bounding rectangle is a face.
    Confidence grows with the contrast between the component and the rest
    of the frame.
    """

    def __init__(self, threshold: float = 64.0, min_side: int = 4, contrast_scale: float = 16.0):
        self.threshold = threshold
        self.min_side = min_side
        self.contrast_scale = contrast_scale

    def detect(self, frame: Frame) -> list[BoundingBox]:
        px = frame.pixels
        # Channel sum in uint16 instead of a float mean: same test, far cheaper.
        total = px[..., 0].astype(np.uint16)
        total += px[..., 1]
        total += px[..., 2]
        mask = total > 3 * self.threshold
        if not mask.any():
            return []
        labels, n = ndimage.label(mask)
        sums = np.bincount(labels.ravel(), weights=total.ravel(), minlength=n + 1)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        background = sums[0] / (3 * sizes[0]) if sizes[0] else 0.0
        boxes = []
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            ys, xs = sl
            w, h = xs.stop - xs.start, ys.stop - ys.start
            if w < self.min_side or h < self.min_side:
                continue
            mean = sums[k] / (3 * sizes[k])
            conf = 1.0 - float(np.exp(-max(mean - background, 0.0) / self.contrast_scale))
            boxes.append(BoundingBox(int(xs.start), int(ys.start), int(w), int(h), conf))
        return boxes


def to_rgb(frame: Frame) -> Frame:
    if frame.channel_order == "RGB":
        return frame
    return replace(frame, pixels=np.ascontiguousarray(frame.pixels[..., ::-1]), channel_order="RGB")


def detect_faces(frame: Frame, min_confidence: float = DEFAULT_MIN_CONFIDENCE,
                 detector: Optional[Detector] = None) -> list[BoundingBox]:
    """Run ``detector`` and keep contained boxes at or above ``min_confidence``."""
    if frame.channel_order != "RGB":
        raise ValueError("detect_faces expects an RGB frame")
    det = detector or MarkerDetector()
    width, height = frame.resolution.width, frame.resolution.height
    boxes = [
        b for b in det.detect(frame)
        if b.confidence >= min_confidence and b.inside(width, height)
    ]
    boxes.sort(key=lambda b: -b.confidence)
    return boxes


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights with corner-aligned sampling.

    Output sample i sits at input coordinate i * (n_in - 1) / (n_out - 1), so
    the first and last outputs coincide with the first and last inputs.
    """
    m = np.zeros((n_out, n_in), dtype=np.float32)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) array with corner-aligned bilinear interpolation."""
    h, w, c = img.shape
    wy = interp_matrix(h, out_h)
    wx = interp_matrix(w, out_w)
    rows = (wy @ img.reshape(h, w * c).astype(np.float32)).reshape(out_h, w, c)
    out = np.tensordot(rows, wx, axes=([1], [1]))  # (out_h, c, out_w)
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def extract_roi(frame: Frame, box: BoundingBox) -> RoiTensor:
    if not box.inside(frame.resolution.width, frame.resolution.height):
        raise BoxOutOfBounds(f"{box} outside {frame.resolution}")
    crop = frame.pixels[box.y : box.y + box.h, box.x : box.x + box.w]
    data = bilinear_resize(crop, ROI_SIZE, ROI_SIZE)
    data *= np.float32(1.0 / 255.0)
    np.clip(data, 0.0, 1.0, out=data)
    return RoiTensor(data, box, frame.index, frame.ground_truth)


def mean_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a.astype(np.int16) - b.astype(np.int16)).mean())


def motion_gate(prev: Frame, curr: Frame, threshold: float) -> bool:
    """True when the mean absolute per-byte difference exceeds ``threshold``."""
    if prev.resolution != curr.resolution:
        raise ResolutionMismatch(f"{prev.resolution} vs {curr.resolution}")
    return mean_abs_diff(prev.pixels, curr.pixels) > threshold
