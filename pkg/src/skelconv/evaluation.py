"""Classification accuracy and temporal-detection average precision.

Matching convention: detections are visited by descending score and each
claims the still-unmatched ground-truth window (same sequence) with the
highest IoU, provided that IoU reaches θ. The precision-recall curve is
integrated with all-point interpolation (area under the monotone precision
envelope).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .windows import Window, WindowSet, iou_1d

DEFAULT_THETAS = (0.1, 0.5)

# Published full-scale results, kept for documentation only; never asserted.
REFERENCE_RESULTS = {
    "ntu_accuracy": {"cross_subject": 0.832, "cross_view": 0.893},
    "ntu_ablation": {
        "CNN": (0.798, 0.852), "CNN+Motion": (0.814, 0.885),
        "CNN+Trans": (0.816, 0.854), "CNN+Motion+Trans": (0.832, 0.893),
    },
    "pku_mmd_map": {
        "cross_subject": {0.1: 0.922, 0.5: 0.904},
        "cross_view": {0.1: 0.958, 0.5: 0.937},
    },
}


def accuracy(predictions, labels) -> float:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    if not labels:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(int(p) == int(y) for p, y in zip(predictions, labels)) / len(labels)


def _check_theta(theta):
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {theta}")


def match_detections(dets, gts, theta: float) -> np.ndarray:
    """True-positive flags for ``dets`` (in descending-score order)."""
    _check_theta(theta)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_seq = {}
    for j, g in enumerate(gts):
        by_seq.setdefault(g.seq_id, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, -1.0
        for j in by_seq.get(d.seq_id, ()):
            if used[j]:
                continue
            o = iou_1d(d, gts[j])
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= theta:
            used[best] = True
            tp[rank] = True
    return tp


def average_precision(dets, gts, theta: float) -> float:
    """All-point interpolated AP of one class's detections."""
    dets, gts = list(dets), list(gts)
    _check_theta(theta)
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    tp = match_detections(dets, gts, theta)
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


@dataclass
class EvalReport:
    accuracy: float | None = None
    per_class_ap: dict = field(default_factory=dict)  # theta -> {class_id: AP}
    map_at_theta: dict = field(default_factory=dict)  # theta -> mAP
    counts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_ap"] = {str(t): {str(c): v for c, v in aps.items()} for t, aps in self.per_class_ap.items()}
        d["map_at_theta"] = {str(t): v for t, v in self.map_at_theta.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["per_class_ap"] = {float(t): {int(c): v for c, v in aps.items()} for t, aps in d["per_class_ap"].items()}
        d["map_at_theta"] = {float(t): v for t, v in d["map_at_theta"].items()}
        return cls(**d)

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta", "class_id", "ap"])
        for t, aps in sorted(self.per_class_ap.items()):
            for c, v in sorted(aps.items()):
                w.writerow([t, c, f"{v:.6f}"])
        return buf.getvalue()


def mean_average_precision(dets, gts, theta=DEFAULT_THETAS) -> EvalReport:
    """Unweighted mean of per-class AP over the classes present in ``gts``.

    ``theta`` may be one threshold or several; each gets its own entry.
    """
    thetas = (theta,) if np.isscalar(theta) else tuple(theta)
    dets, gts = list(dets), list(gts)
    gt_classes = sorted({g.class_id for g in gts})
    det_classes = sorted({d.class_id for d in dets})
    report = EvalReport(counts={"gt": len(gts), "detections": len(dets)},
                        meta={"matching": "greedy score order, highest-IoU unmatched gt",
                              "interpolation": "all-point",
                              "excluded_classes": [c for c in det_classes if c not in gt_classes]})
    for t in thetas:
        _check_theta(t)
        aps = {c: average_precision([d for d in dets if d.class_id == c],
                                    [g for g in gts if g.class_id == c], t) for c in gt_classes}
        report.per_class_ap[t] = aps
        report.map_at_theta[t] = float(np.mean(list(aps.values()))) if aps else 0.0
    return report


# ---------------------------------------------------------------- detection records

def format_detections(windows) -> str:
    """``sequence_id,class_id,start,end,score`` lines."""
    return "".join(f"{w.seq_id},{w.class_id},{w.start:.4f},{w.end:.4f},{w.score:.6f}\n" for w in windows)


def parse_detections(text: str) -> WindowSet:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        sid, cls, s, e, sc = parts
        out.append(Window(float(s), float(e), float(sc), int(cls), sid))
    return WindowSet(out)
