"""Temporal windows and their 1-D geometry: IoU, regression coding, NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Window:
    """Half-open temporal interval ``[start, end)`` in frame units."""

    start: float
    end: float
    score: float = 1.0
    class_id: int | None = None
    seq_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"window bounds must be finite: {self.start}, {self.end}")
        if not self.start < self.end:
            raise ValueError(f"window needs start < end, got [{self.start}, {self.end})")
        if not math.isfinite(self.score):
            raise ValueError("window score must be finite")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def with_(self, **kw) -> "Window":
        return replace(self, **kw)


@dataclass
class WindowSet:
    """Ordered collection of windows plus parse/processing metadata."""

    windows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __getitem__(self, i):
        return self.windows[i]

    def by_class(self, class_id):
        return [w for w in self.windows if w.class_id == class_id]

    def class_ids(self):
        return sorted({w.class_id for w in self.windows if w.class_id is not None})


@dataclass(frozen=True)
class RegressionTarget:
    t_c: float
    t_l: float


def iou_1d(a: Window, b: Window) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two arrays of ``(start, end)`` rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.clip(inter, 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode_window(anchor: Window, gt: Window) -> RegressionTarget:
    la, lg = anchor.end - anchor.start, gt.end - gt.start
    if la <= 0 or lg <= 0:
        raise ValueError("window lengths must be positive")
    return RegressionTarget((gt.center - anchor.center) / la, math.log(lg / la))


def decode_window(anchor: Window, t: RegressionTarget) -> Window:
    la = anchor.end - anchor.start
    if la <= 0:
        raise ValueError("anchor length must be positive")
    c = anchor.center + t.t_c * la
    half = 0.5 * la * math.exp(t.t_l)
    return Window(c - half, c + half, anchor.score, anchor.class_id, anchor.seq_id)


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`encode_window` over ``(start, end)`` rows; returns ``(t_c, t_l)`` rows."""
    la = anchors[:, 1] - anchors[:, 0]
    lg = gts[:, 1] - gts[:, 0]
    ca = anchors[:, 0] + 0.5 * la
    cg = gts[:, 0] + 0.5 * lg
    return np.stack([(cg - ca) / la, np.log(lg / la)], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray, max_log=math.log(1000.0 / 16)) -> np.ndarray:
    la = anchors[:, 1] - anchors[:, 0]
    ca = anchors[:, 0] + 0.5 * la
    c = ca + deltas[:, 0] * la
    # cap the log-length like box decoders do, so untrained heads can't overflow exp
    half = 0.5 * la * np.exp(np.minimum(deltas[:, 1], max_log))
    return np.stack([c - half, c + half], axis=1)


def nms(windows, iou_threshold: float) -> list:
    """Greedy non-maximum suppression.

    Windows are visited by descending score (ties: earlier start, then input
    order); a window is dropped iff its IoU with an already kept window
    exceeds ``iou_threshold``.
    """
    windows = list(windows)
    if not windows:
        return []
    order = sorted(range(len(windows)), key=lambda i: (-windows[i].score, windows[i].start, i))
    keep = nms_indices(np.array([[windows[i].start, windows[i].end] for i in order]), iou_threshold)
    return [windows[order[k]] for k in keep]


def nms_indices(spans: np.ndarray, iou_threshold: float, limit: int | None = None) -> list:
    """NMS over rows already sorted by priority; returns kept row indices."""
    n = len(spans)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        if limit is not None and len(keep) >= limit:
            break
        rest = np.arange(i + 1, n)
        rest = rest[~suppressed[rest]]
        if rest.size:
            suppressed[rest[iou_matrix(spans[i:i + 1], spans[rest])[0] > iou_threshold]] = True
    return keep
