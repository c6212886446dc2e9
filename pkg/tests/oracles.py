"""Independent reference implementations used as test oracles.

Each function re-derives a result from first principles with plain loops,
sharing no code with the package logic it checks.
"""

from __future__ import annotations

import heapq
import math
from collections import deque


# --- temporal ----------------------------------------------------------------

def brute_force_filter(labels_seq, confs_seq, window, label_set, rule="majority", fps=25.0):
    """Recompute the stable label from the explicit last-k window at every step.

    Returns (stable labels per step, final cumulative counters). Ties keep
    the previous stable label; accrual counts one interval per step when the
    stable label equals the previous step's stable label.
    """
    frame_ms = 1000.0 / fps
    stable = "unknown"
    out = []
    counters = {lab: 0.0 for lab in label_set}
    prev_stable = None
    for i in range(len(labels_seq)):
        lo = max(0, i - window + 1)
        win_labels = labels_seq[lo:i + 1]
        if rule == "majority":
            scores = {}
            for lab in win_labels:
                scores[lab] = scores.get(lab, 0) + 1
        else:
            scores = {lab: 0.0 for lab in label_set}
            for j in range(lo, i + 1):
                for k, lab in enumerate(label_set):
                    scores[lab] += confs_seq[j][k]
        best = max(scores.values())
        winners = [lab for lab in scores if scores[lab] == best]
        changed = False
        if len(winners) == 1 and winners[0] != stable:
            stable = winners[0]
            changed = True
        if not changed and prev_stable is not None and stable != "unknown" and stable == prev_stable:
            counters[stable] += frame_ms
        prev_stable = stable
        out.append(stable)
    return out, counters


def whole_trace_alerts(stable_seq, times_ms, label, sustain_ms, cooldown_ms):
    """Offline alert times from a complete stable-label trace.

    An episode is a maximal run of ``label``; it alerts once, at the first
    frame whose time is at least sustain_ms after the episode began, unless
    that instant is within the cooldown of the previous alert.
    """
    alerts = []
    last = None
    i = 0
    n = len(stable_seq)
    while i < n:
        if stable_seq[i] != label:
            i += 1
            continue
        start = times_ms[i]
        j = i
        fired = False
        while j < n and stable_seq[j] == label:
            t = times_ms[j]
            if not fired and t - start >= sustain_ms and (last is None or t - last >= cooldown_ms):
                alerts.append((t, start))
                last = t
                fired = True
            j += 1
        i = j
    return alerts


# --- queueing ----------------------------------------------------------------

def des_drop_oldest(n_frames, period_ms, service_ms, capacity):
    """Discrete-event simulation of one server fed by a bounded drop-oldest queue.

    Frames arrive every ``period_ms``; the waiting room holds ``capacity``
    frames; an arrival into a full room evicts the oldest waiting frame.
    ``service_ms`` is a constant or a callable(index) -> ms.
    Returns (processed indices, dropped count).
    """
    svc = service_ms if callable(service_ms) else (lambda _i: service_ms)
    events = [(k * period_ms, 1, k) for k in range(n_frames)]  # (time, kind, frame); 0 = departure
    heapq.heapify(events)
    room = deque()
    busy = False
    done = []
    dropped = 0
    while events:
        t, kind, k = heapq.heappop(events)
        if kind == 0:
            done.append(k)
            busy = False
        else:
            if len(room) >= capacity:
                room.popleft()
                dropped += 1
            room.append(k)
        if not busy and room:
            nxt = room.popleft()
            busy = True
            heapq.heappush(events, (t + svc(nxt), 0, nxt))
    return done, dropped


def flush_schedule(event_times_ms, interval_ms, horizon_ms, max_batch=256):
    """Batch deliveries (time, count) for routine events under a fixed tick schedule."""
    pending = 0
    out = []
    ev = sorted(event_times_ms)
    i = 0
    tick = interval_ms
    while tick <= horizon_ms:
        while i < len(ev) and ev[i] <= tick:
            pending += 1
            i += 1
        if pending:
            n = min(pending, max_batch)
            out.append((tick, n))
            pending -= n
        tick += interval_ms
    return out


# --- calibration -------------------------------------------------------------

def nll(a, b, zs, ys):
    total = 0.0
    for z, y in zip(zs, ys):
        u = a * z + b
        # log(1 + exp(u)) evaluated stably
        softplus = u + math.log1p(math.exp(-u)) if u > 0 else math.log1p(math.exp(u))
        total += softplus - y * u
    return total / len(zs)


def grid_platt(zs, ys, lo=-10.0, hi=10.0, step=0.25):
    """Best (nll, a, b) on a regular grid over [lo, hi]^2."""
    best = (math.inf, 0.0, 0.0)
    n = int(round((hi - lo) / step))
    for i in range(n + 1):
        a = lo + i * step
        for j in range(n + 1):
            b = lo + j * step
            v = nll(a, b, zs, ys)
            if v < best[0]:
                best = (v, a, b)
    return best


# --- images ------------------------------------------------------------------

def bilinear_point(img, y, x):
    """Sample an (H, W, C) nested-list/array image at fractional (y, x)."""
    h, w = len(img), len(img[0])
    y0 = min(int(math.floor(y)), h - 1)
    x0 = min(int(math.floor(x)), w - 1)
    y1 = min(y0 + 1, h - 1)
    x1 = min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    out = []
    for c in range(len(img[0][0])):
        top = img[y0][x0][c] * (1 - fx) + img[y0][x1][c] * fx
        bot = img[y1][x0][c] * (1 - fx) + img[y1][x1][c] * fx
        out.append(top * (1 - fy) + bot * fy)
    return out


def bilinear_oracle(img, out_h, out_w, samples):
    """Corner-aligned bilinear values at the given output (i, j) positions."""
    h, w = len(img), len(img[0])
    res = {}
    for i, j in samples:
        y = i * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        x = j * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
        res[(i, j)] = bilinear_point(img, y, x)
    return res


def pixel_scan_boxes(pixels, threshold=64):
    """Bounding rectangle of pixels whose channel mean exceeds ``threshold``.

    Treats all bright pixels as one object (fixtures hold a single marker).
    """
    h, w = len(pixels), len(pixels[0])
    xs, ys = [], []
    for y in range(h):
        row = pixels[y]
        for x in range(w):
            r, g, b = row[x]
            if int(r) + int(g) + int(b) > 3 * threshold:
                xs.append(x)
                ys.append(y)
    if not xs:
        return []
    return [(min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)]


def mad_oracle(a_bytes, b_bytes):
    total = 0
    for p, q in zip(a_bytes, b_bytes):
        total += abs(p - q)
    return total / len(a_bytes)


def border_pixels(x, y, w, h, thickness, width, height):
    """Set of (row, col) on a rectangle outline drawn inward with ``thickness``."""
    out = set()
    for r in range(y, y + h):
        for c in range(x, x + w):
            if (r - y < thickness or y + h - 1 - r < thickness
                    or c - x < thickness or x + w - 1 - c < thickness):
                if 0 <= r < height and 0 <= c < width:
                    out.add((r, c))
    return out


# --- statistics / cost model ---------------------------------------------------

def reference_stats(samples):
    n = len(samples)
    mean = sum(samples) / n
    var = sum((s - mean) ** 2 for s in samples) / (n - 1) if n > 1 else 0.0
    return {"mean": mean, "std": math.sqrt(var), "min": min(samples), "max": max(samples)}


def feasibility_mid(read, face, pose, infer, faces, include_pose, skip=1):
    """Midpoint per-frame cost from (lo, hi) stage ranges."""
    mid = lambda r: (r[0] + r[1]) / 2
    total = mid(read) + mid(face) + (mid(pose) if include_pose else 0.0) + faces * mid(infer)
    return total / skip
