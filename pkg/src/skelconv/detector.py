"""Window proposal network and R-CNN head for temporal action detection.

The untrimmed sequence is encoded as one long skeleton image and passed
through the classification backbone. Its last feature map, flattened over
the joint axis, is a ``C×F`` temporal map with one column per
``feature_stride`` frames. The window proposal network (WPN) scores and
regresses 1-D anchors on that map; the top proposals are pooled by 1-D
crop-and-resize and classified by the dense stages.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ModelCheckpoint, SgdConfig, Tensor
from .classifier import ClassifierConfig, backbone, init_backbone, init_dense
from .skeleton_data import SkeletonSequence, encode_sequence, resize_temporal
from .windows import (Window, WindowSet, decode_array, encode_array, iou_matrix, nms_indices)

log = logging.getLogger(__name__)

DEFAULT_ANCHOR_SCALES = (50, 100, 200, 400)
BACKGROUND = 0


@dataclass
class AnchorConfig:
    scales: tuple = DEFAULT_ANCHOR_SCALES
    feature_stride: int = 8

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("anchor scales must be positive")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("anchor scales must be strictly increasing")
        if self.feature_stride < 1:
            raise ValueError("feature_stride must be >= 1")


@dataclass
class MatchConfig:
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    proposal_nms_iou: float = 0.7
    pre_nms_top: int = 1000
    proposals_kept: int = 64
    min_proposal_length: float = 4.0
    wpn_batch: int = 64
    wpn_fg_fraction: float = 0.5
    rcnn_batch: int = 32
    rcnn_fg_fraction: float = 0.25
    rcnn_fg_iou: float = 0.5
    rcnn_bg_iou_low: float = 0.0
    # anchors reaching further than this outside the sequence are ignored in training
    allowed_border: float = 0.0

    def __post_init__(self):
        for name in ("positive_iou", "negative_iou", "proposal_nms_iou", "rcnn_fg_iou", "rcnn_bg_iou_low"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.negative_iou < self.positive_iou:
            raise ValueError("negative_iou must be below positive_iou")


@dataclass
class DetectorConfig:
    n_classes: int = 3  # action classes; class 0 is background
    backbone: ClassifierConfig = field(default_factory=lambda: ClassifierConfig(class_count=4))
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    wpn_channels: int = 128
    bins: int = 4
    reg_std: tuple = (0.1, 0.2)
    score_threshold: float = 0.05
    final_nms_iou: float = 0.3
    max_detections: int = 100
    scale_range: tuple = (0.8, 1.5)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = ClassifierConfig(**self.backbone)
        if isinstance(self.anchors, dict):
            self.anchors = AnchorConfig(**self.anchors)
        if isinstance(self.match, dict):
            self.match = MatchConfig(**self.match)
        self.reg_std = tuple(self.reg_std)
        self.scale_range = tuple(self.scale_range)
        if self.anchors.feature_stride != self.backbone.feature_stride:
            raise ValueError(f"feature_stride must equal the backbone stride {self.backbone.feature_stride}")
        if self.n_classes < 1 or self.bins < 1:
            raise ValueError("n_classes and bins must be >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("invalid scale_range")

    @property
    def feature_channels(self) -> int:
        c3 = self.backbone.conv_channels[2] * (self.backbone.streams if self.backbone.fusion == "late" else 1)
        return c3 * self.backbone.pooled_size(8)[1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------- anchors & targets

def anchor_array(n_positions: int, cfg: AnchorConfig) -> np.ndarray:
    """``(n_positions * len(scales))×2`` anchors, position-major then scale."""
    centers = (np.arange(n_positions) + 0.5) * cfg.feature_stride
    half = np.asarray(cfg.scales, dtype=np.float64) / 2
    starts = centers[:, None] - half[None, :]
    ends = centers[:, None] + half[None, :]
    return np.stack([starts.ravel(), ends.ravel()], axis=1)


def generate_anchors(sequence_length: int, cfg: AnchorConfig) -> list:
    """One anchor per scale at each feature position, in frame coordinates.

    Anchors may reach outside ``[0, sequence_length]``.
    """
    n = sequence_length // cfg.feature_stride
    return [Window(float(s), float(e), 0.0) for s, e in anchor_array(n, cfg)]


def _spans(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows.reshape(-1, 2).astype(np.float64)
    return np.array([[w.start, w.end] for w in windows], dtype=np.float64).reshape(-1, 2)


@dataclass
class WpnTargets:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignored
    targets: np.ndarray  # n×2 (t_c, t_l) toward the best-matching gt
    max_iou: np.ndarray


def assign_wpn_targets(anchors, gt, cfg: MatchConfig, sequence_length=None, rng=None) -> WpnTargets:
    """Label anchors positive / negative / ignored against ground-truth windows.

    Positive: IoU >= ``positive_iou`` with some gt, or the best anchor for
    some gt. Negative: max IoU <= ``negative_iou``. With ``rng`` the labels
    are subsampled to ``wpn_batch`` with at most ``wpn_fg_fraction`` positive.
    With ``sequence_length`` anchors crossing the sequence boundary by more
    than ``allowed_border`` are ignored.
    """
    a = _spans(anchors)
    g = _spans(gt)
    n = len(a)
    labels = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 2))
    inside = np.ones(n, dtype=bool)
    if sequence_length is not None:
        b = cfg.allowed_border
        inside = (a[:, 0] >= -b) & (a[:, 1] <= sequence_length + b)
    if len(g) == 0:
        labels[inside] = 0
        return _subsample(WpnTargets(labels, targets, np.zeros(n)), cfg, rng)

    iou = iou_matrix(a, g)
    iou[~inside] = -1.0
    best_gt = iou.argmax(axis=1)
    max_iou = iou[np.arange(n), best_gt]
    labels[inside & (max_iou <= cfg.negative_iou)] = 0
    gt_best = iou.max(axis=0)
    is_best = (iou == gt_best[None, :]) & (gt_best[None, :] > 0)
    labels[is_best.any(axis=1)] = 1
    labels[inside & (max_iou >= cfg.positive_iou)] = 1
    targets = encode_array(a, g[best_gt])
    return _subsample(WpnTargets(labels, targets, np.maximum(max_iou, 0.0)), cfg, rng)


def _subsample(t: WpnTargets, cfg: MatchConfig, rng) -> WpnTargets:
    if rng is None:
        return t
    labels = t.labels
    fg = np.flatnonzero(labels == 1)
    n_fg = int(cfg.wpn_fg_fraction * cfg.wpn_batch)
    if len(fg) > n_fg:
        labels[rng.choice(fg, len(fg) - n_fg, replace=False)] = -1
    bg = np.flatnonzero(labels == 0)
    n_bg = cfg.wpn_batch - int((labels == 1).sum())
    if len(bg) > n_bg:
        labels[rng.choice(bg, len(bg) - n_bg, replace=False)] = -1
    return t


# ---------------------------------------------------------------- crop and resize

def interpolation_matrix(window, n_positions: int, bins: int, feature_stride: int) -> tuple:
    """``F×bins`` matrix sampling a window's cell centres by linear interpolation.

    Feature column ``i`` sits at frame ``(i + 0.5) * feature_stride``. Windows
    shorter than one feature cell are widened to one cell around their
    centre; the second return value flags that.
    """
    s, e = (window.start, window.end) if isinstance(window, Window) else window
    expanded = False
    if e - s < feature_stride:
        c = 0.5 * (s + e)
        s, e = c - 0.5 * feature_stride, c + 0.5 * feature_stride
        expanded = True
    u = (s + (np.arange(bins) + 0.5) * (e - s) / bins) / feature_stride - 0.5
    A = np.zeros((n_positions, bins))
    cols = np.arange(bins)
    if n_positions == 1:
        A[0] = 1.0
        return A, expanded
    u = np.clip(u, 0.0, n_positions - 1)
    lo = np.minimum(np.floor(u).astype(int), n_positions - 2)
    frac = u - lo
    A[lo, cols] += 1.0 - frac
    A[lo + 1, cols] += frac
    return A, expanded


def crop_and_resize_windows(features, windows, bins: int, feature_stride: int = 8) -> tuple:
    """Pool each window of a ``C×F`` map to ``C×bins``; returns ``(R×C×bins, expanded mask)``."""
    feats = ad.as_tensor(features)
    C, F = feats.shape
    spans = _spans(windows)
    mats, flags = zip(*(interpolation_matrix(sp, F, bins, feature_stride) for sp in spans)) if len(spans) else ((), ())
    A = np.stack(mats).astype(feats.dtype) if mats else np.zeros((0, F, bins), dtype=feats.dtype)
    out = np.einsum("cf,rfb->rcb", feats.data, A)

    def bw(g):
        return (np.einsum("rcb,rfb->cf", g, A),)

    return ad._make(out, (feats,), bw, "crop_and_resize"), np.array(flags, dtype=bool)


def crop_and_resize_1d(features, window, bins: int, feature_stride: int = 8) -> tuple:
    """Single-window form of :func:`crop_and_resize_windows`: ``(C×bins, expanded)``."""
    out, flags = crop_and_resize_windows(features, [window], bins, feature_stride)
    return ad.getitem(out, 0), bool(flags[0])


# ---------------------------------------------------------------- model

def init_detector_params(cfg: DetectorConfig, rng: np.random.Generator) -> dict:
    dtype = np.dtype(cfg.backbone.dtype)
    params = init_backbone(cfg.backbone, rng)
    A = len(cfg.anchors.scales)
    C = cfg.feature_channels
    params["wpn_conv.w"] = ad.kaiming_uniform(rng, (cfg.wpn_channels, C, 3, 1), C * 3, dtype)
    params["wpn_conv.b"] = np.zeros(cfg.wpn_channels, dtype=dtype)
    params["wpn_cls.w"] = (rng.normal(0, 0.01, (2 * A, cfg.wpn_channels, 1, 1))).astype(dtype)
    params["wpn_cls.b"] = np.zeros(2 * A, dtype=dtype)
    params["wpn_reg.w"] = (rng.normal(0, 0.001, (2 * A, cfg.wpn_channels, 1, 1))).astype(dtype)
    params["wpn_reg.b"] = np.zeros(2 * A, dtype=dtype)
    c3 = C // cfg.backbone.pooled_size(8)[1]
    flat = c3 * cfg.bins * cfg.backbone.pooled_size(8)[1]
    h1, h2 = cfg.backbone.fc_hidden
    init_dense(params, "fc1", flat, h1, rng, dtype)
    init_dense(params, "fc2", h1, h2, rng, dtype)
    K1 = cfg.n_classes + 1
    params["fc3.w"] = rng.normal(0, 0.01, (h2, K1)).astype(dtype)
    params["fc3.b"] = np.zeros(K1, dtype=dtype)
    params["fc_reg.w"] = rng.normal(0, 0.001, (h2, 2 * K1)).astype(dtype)
    params["fc_reg.b"] = np.zeros(2 * K1, dtype=dtype)
    return params


class TemporalDetector:
    def __init__(self, config: DetectorConfig, params: dict):
        self.config = config
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}

    @classmethod
    def create(cls, config: DetectorConfig, rng_seed: int = 0) -> "TemporalDetector":
        return cls(config, init_detector_params(config, np.random.default_rng(rng_seed)))

    @classmethod
    def from_checkpoint(cls, ck: ModelCheckpoint) -> "TemporalDetector":
        if ck.kind != "detector":
            raise ad.CheckpointError(f"expected a detector checkpoint, got {ck.kind!r}")
        return cls(DetectorConfig.from_dict(ck.config), ck.params)

    def checkpoint(self, **extra) -> ModelCheckpoint:
        return ModelCheckpoint("detector", self.config.to_dict(),
                               {k: v.data.copy() for k, v in self.params.items()}, extra)

    def requires_grad_(self, flag=True):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    # -- stages

    def feature_map(self, x) -> Tensor:
        """``C×F`` temporal feature map for a ``1×P×2×T×N×3`` input."""
        feats = backbone(self.params, self.config.backbone, x)  # 1×C3×F×W
        _, C3, F, W = feats.shape
        fm = ad.transpose(feats, (0, 1, 3, 2))
        return ad.reshape(fm, (C3 * W, F))

    def wpn(self, fmap: Tensor) -> tuple:
        """Per-anchor ``(logits n×2, deltas n×2)`` in :func:`anchor_array` order."""
        p = self.params
        C, F = fmap.shape
        A = len(self.config.anchors.scales)
        x = ad.reshape(fmap, (1, C, F, 1))
        h = ad.relu(ad.conv2d(x, p["wpn_conv.w"], p["wpn_conv.b"], padding=(1, 0)))
        cls = ad.conv2d(h, p["wpn_cls.w"], p["wpn_cls.b"])
        reg = ad.conv2d(h, p["wpn_reg.w"], p["wpn_reg.b"])

        def per_anchor(t):
            t = ad.reshape(t, (A, 2, F))
            t = ad.transpose(t, (2, 0, 1))
            return ad.reshape(t, (F * A, 2))

        return per_anchor(cls), per_anchor(reg)

    def rcnn(self, fmap: Tensor, rois: np.ndarray) -> tuple:
        """``(logits R×(K+1), deltas R×2(K+1))`` for ``rois`` in frame coordinates."""
        cfg = self.config
        W = cfg.backbone.pooled_size(8)[1]
        crops, _ = crop_and_resize_windows(fmap, rois, cfg.bins, cfg.anchors.feature_stride)
        R, C, bins = crops.shape
        x = ad.reshape(crops, (R, C // W, W, bins))
        x = ad.transpose(x, (0, 1, 3, 2))
        x = ad.reshape(x, (R, -1))
        p = self.params
        h = ad.relu(ad.dense(x, p["fc1.w"], p["fc1.b"]))
        h = ad.relu(ad.dense(h, p["fc2.w"], p["fc2.b"]))
        return ad.dense(h, p["fc3.w"], p["fc3.b"]), ad.dense(h, p["fc_reg.w"], p["fc_reg.b"])

    def proposals(self, logits: np.ndarray, deltas: np.ndarray, anchors: np.ndarray, length: float) -> tuple:
        """Decode, clip, filter, sort and NMS anchor predictions into proposals."""
        m = self.config.match
        scores = ad.softmax(logits.astype(np.float64))[:, 1]
        boxes = np.clip(decode_array(anchors, deltas.astype(np.float64)), 0.0, length)
        ok = (boxes[:, 1] - boxes[:, 0]) >= min(m.min_proposal_length, length)
        boxes, scores = boxes[ok], scores[ok]
        order = np.lexsort((np.arange(len(scores)), boxes[:, 0], -scores))[:m.pre_nms_top]
        boxes, scores = boxes[order], scores[order]
        keep = nms_indices(boxes, m.proposal_nms_iou, limit=m.proposals_kept)
        return boxes[keep], scores[keep]


def encode_untrimmed(seq: SkeletonSequence, cfg: DetectorConfig) -> np.ndarray:
    return encode_sequence(seq, None, cfg.backbone.p_fixed)[None].astype(cfg.backbone.dtype)


def forward_detect(seq: SkeletonSequence, model: TemporalDetector) -> WindowSet:
    """Final detections (class ids >= 1) for one untrimmed sequence."""
    cfg = model.config
    T = seq.n_frames
    if seq.n_joints != cfg.backbone.n_joints:
        raise ValueError(f"sequence has {seq.n_joints} joints, model expects {cfg.backbone.n_joints}")
    if T < cfg.anchors.feature_stride:
        return WindowSet([], {"reason": "sequence shorter than one feature stride"})
    model.requires_grad_(False)
    fmap = model.feature_map(encode_untrimmed(seq, cfg))
    F = fmap.shape[1]
    anchors = anchor_array(F, cfg.anchors)
    logits, deltas = model.wpn(fmap)
    rois, _ = model.proposals(logits.data, deltas.data, anchors, float(T))
    if not len(rois):
        return WindowSet([], {"proposals": 0})
    cls_logits, reg = model.rcnn(fmap, rois)
    probs = ad.softmax(cls_logits.data.astype(np.float64))
    reg = reg.data.astype(np.float64).reshape(len(rois), -1, 2) * np.asarray(cfg.reg_std)
    dets = []
    for k in range(1, cfg.n_classes + 1):
        score = probs[:, k]
        boxes = np.clip(decode_array(rois, reg[:, k]), 0.0, float(T))
        ok = (score >= cfg.score_threshold) & (boxes[:, 1] - boxes[:, 0] > 1e-6)
        if not ok.any():
            continue
        b, s = boxes[ok], score[ok]
        order = np.lexsort((np.arange(len(s)), b[:, 0], -s))
        b, s = b[order], s[order]
        for i in nms_indices(b, cfg.final_nms_iou):
            dets.append(Window(float(b[i, 0]), float(b[i, 1]), float(s[i]), k, seq.seq_id))
    dets.sort(key=lambda w: (-w.score, w.start, w.class_id))
    return WindowSet(dets[:cfg.max_detections], {"proposals": int(len(rois))})


# ---------------------------------------------------------------- training

def augment_sequence(seq: SkeletonSequence, factor: float) -> tuple:
    """Temporally rescale a sequence and its segments; returns ``(seq, gt spans)``."""
    T = seq.n_frames
    new_T = max(int(round(T * factor)), 1)
    out = seq if new_T == T else resize_temporal(seq, new_T)
    ratio = new_T / T
    gt = np.array([[w.start * ratio, w.end * ratio] for w in (seq.segments or [])]).reshape(-1, 2)
    cls = np.array([w.class_id for w in (seq.segments or [])], dtype=np.int64)
    return out, gt, cls


def rcnn_targets(rois: np.ndarray, gt: np.ndarray, gt_cls: np.ndarray, cfg: DetectorConfig, rng=None) -> tuple:
    """Sample RoIs and build class labels plus per-class regression targets.

    Returns ``(rois, labels, targets R×2(K+1), inside_weights)``.
    """
    m = cfg.match
    K1 = cfg.n_classes + 1
    if len(gt):
        iou = iou_matrix(rois, gt)
        best = iou.argmax(axis=1)
        max_iou = iou[np.arange(len(rois)), best]
    else:
        best = np.zeros(len(rois), dtype=int)
        max_iou = np.zeros(len(rois))
    fg = np.flatnonzero(max_iou >= m.rcnn_fg_iou)
    bg = np.flatnonzero((max_iou < m.rcnn_fg_iou) & (max_iou >= m.rcnn_bg_iou_low))
    if rng is not None:
        n_fg = min(len(fg), int(round(m.rcnn_fg_fraction * m.rcnn_batch)))
        fg = rng.choice(fg, n_fg, replace=False) if len(fg) > n_fg else fg
        n_bg = min(len(bg), m.rcnn_batch - len(fg))
        bg = rng.choice(bg, n_bg, replace=False) if len(bg) > n_bg else bg
    keep = np.concatenate([fg, bg]).astype(int)
    rois = rois[keep]
    labels = np.zeros(len(keep), dtype=np.int64)
    labels[:len(fg)] = gt_cls[best[fg]] if len(gt) else 0
    targets = np.zeros((len(keep), 2 * K1))
    weights = np.zeros_like(targets)
    if len(fg):
        t = encode_array(rois[:len(fg)], gt[best[fg]]) / np.asarray(cfg.reg_std)
        for i, c in enumerate(labels[:len(fg)]):
            targets[i, 2 * c:2 * c + 2] = t[i]
            weights[i, 2 * c:2 * c + 2] = 1.0
    return rois, labels, targets, weights


@dataclass
class DetTrainConfig:
    epochs: int = 40
    log_every: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class DetTrainResult:
    checkpoint: ModelCheckpoint
    losses: list = field(default_factory=list)  # one record per iteration
    model: TemporalDetector | None = None


def detector_loss(model: TemporalDetector, seq: SkeletonSequence, gt: np.ndarray, gt_cls: np.ndarray,
                  rng: np.random.Generator) -> tuple:
    """Summed WPN + R-CNN loss for one (already augmented) sequence."""
    cfg = model.config
    T = seq.n_frames
    fmap = model.feature_map(encode_untrimmed(seq, cfg))
    F = fmap.shape[1]
    anchors = anchor_array(F, cfg.anchors)
    logits, deltas = model.wpn(fmap)

    tg = assign_wpn_targets(anchors, gt, cfg.match, sequence_length=T, rng=rng)
    sampled = np.flatnonzero(tg.labels >= 0)
    pos = tg.labels == 1
    wpn_cls = ad.softmax_cross_entropy(ad.getitem(logits, sampled), tg.labels[sampled])
    w = np.repeat(pos[:, None], 2, axis=1).astype(deltas.dtype)
    wpn_reg = ad.smooth_l1(deltas, tg.targets.astype(deltas.dtype), w, normalizer=max(len(sampled), 1))

    rois, _ = model.proposals(logits.data, deltas.data, anchors, float(T))
    if len(gt):
        rois = np.concatenate([rois, gt])
    rois, labels, targets, weights = rcnn_targets(rois, gt, gt_cls, cfg, rng)
    parts = {"wpn_cls": wpn_cls, "wpn_reg": wpn_reg}
    if len(rois):
        cls_logits, reg = model.rcnn(fmap, rois)
        parts["rcnn_cls"] = ad.softmax_cross_entropy(cls_logits, labels)
        parts["rcnn_reg"] = ad.smooth_l1(reg, targets.astype(reg.dtype), weights, normalizer=len(rois))
    total = parts["wpn_cls"]
    for k in ("wpn_reg", "rcnn_cls", "rcnn_reg"):
        if k in parts:
            total = ad.add(total, parts[k])
    return total, {k: v.item() for k, v in parts.items()}


def train_detector(dataset, config: DetectorConfig, sgd: SgdConfig, rng_seed: int,
                   train_cfg: DetTrainConfig | None = None, on_iteration=None) -> DetTrainResult:
    """Jointly train WPN and R-CNN, one sequence per iteration.

    Each visit rescales the sequence by a factor drawn from
    ``config.scale_range``; the schedule in ``sgd`` counts epochs.
    """
    train_cfg = train_cfg or DetTrainConfig()
    if not len(dataset):
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(rng_seed)
    model = TemporalDetector(config, init_detector_params(config, rng))
    state = None
    losses = []
    it = 0
    for epoch in range(train_cfg.epochs):
        lr = sgd.lr_at(epoch)
        for i in rng.permutation(len(dataset)):
            seq = dataset[i]
            factor = float(rng.uniform(*config.scale_range))
            aug, gt, gt_cls = augment_sequence(seq, factor)
            if aug.n_frames < config.anchors.feature_stride:
                continue
            model.requires_grad_(True)
            loss, parts = detector_loss(model, aug, gt, gt_cls, rng)
            ad.backward(loss)
            state = ad.sgd_step(model.params, sgd, state, lr=lr)
            rec = {"iteration": it, "epoch": epoch, "lr": lr, "loss": loss.item(), "scale": factor, **parts}
            losses.append(rec)
            if on_iteration is not None:
                on_iteration(rec)
            it += 1
    ck = model.checkpoint(seed=rng_seed, iterations=it, sgd=asdict(sgd), train=train_cfg.to_dict())
    return DetTrainResult(ck, losses, model)
