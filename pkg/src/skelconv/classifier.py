"""Two-stream skeleton CNN with a learned joint transformer and person maxout.

Layout of a network input batch: ``B×P×2×T×N×3`` (batch, person, stream,
time, joint, xyz). Inside the network each person/stream becomes a 3-channel
``T×N`` image.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ModelCheckpoint, SgdConfig, Tensor
from .skeleton_data import SkeletonImagePair, SkeletonSequence, encode_sequence

log = logging.getLogger(__name__)

FUSIONS = ("early", "late")


@dataclass
class ClassifierConfig:
    n_joints: int = 25
    m_joints: int | None = None  # defaults to n_joints
    t_fixed: int = 32
    p_fixed: int = 2
    class_count: int = 60
    conv_channels: tuple = (32, 32, 64)
    fc_hidden: tuple = (1024, 512)
    kernel: int = 3
    fusion: str = "early"
    use_motion: bool = True
    use_transformer: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.m_joints is None:
            self.m_joints = self.n_joints
        self.conv_channels = tuple(self.conv_channels)
        self.fc_hidden = tuple(self.fc_hidden)
        if len(self.conv_channels) != 3 or len(self.fc_hidden) != 2:
            raise ValueError("the network has exactly 3 conv and 3 dense stages after the transformer")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if min(self.n_joints, self.m_joints, self.t_fixed, self.p_fixed, self.class_count) < 1:
            raise ValueError("sizes must be positive")
        if not self.use_transformer and self.m_joints != self.n_joints:
            raise ValueError("m_joints must equal n_joints without the transformer")

    @property
    def fc_widths(self) -> tuple:
        return (*self.fc_hidden, self.class_count)

    @property
    def streams(self) -> int:
        return 2 if self.use_motion else 1

    @property
    def feature_stride(self) -> int:
        return 8

    def pooled_size(self, t: int) -> tuple:
        h, w = t, self.m_joints
        for _ in range(3):
            h, w = h // 2, w // 2
        return h, w

    @property
    def flat_features(self) -> int:
        h, w = self.pooled_size(self.t_fixed)
        c = self.conv_channels[2] * (self.streams if self.fusion == "late" else 1)
        return c * h * w

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------- parameters

def _conv_shapes(cfg: ClassifierConfig) -> dict:
    """name -> (kernel shape) for every convolution in the backbone."""
    c1, c2, c3 = cfg.conv_channels
    k = cfg.kernel
    names = ["coord", "motion"][:cfg.streams]
    shapes = {}
    if cfg.fusion == "early":
        for s in names:
            shapes[f"conv1_{s}"] = (c1, 3, k, k)
        shapes["conv2"] = (c2, c1 * cfg.streams, k, k)
        shapes["conv3"] = (c3, c2, k, k)
    else:
        for s in names:
            shapes[f"conv1_{s}"] = (c1, 3, k, k)
            shapes[f"conv2_{s}"] = (c2, c1, k, k)
            shapes[f"conv3_{s}"] = (c3, c2, k, k)
    return shapes


def init_backbone(cfg: ClassifierConfig, rng: np.random.Generator) -> dict:
    dtype = np.dtype(cfg.dtype)
    params = {}
    if cfg.use_transformer:
        N, M = cfg.n_joints, cfg.m_joints
        w = np.zeros((N, M))
        d = min(N, M)
        w[np.arange(d), np.arange(d)] = 1.0
        w += rng.uniform(-0.01, 0.01, size=(N, M))
        params["transformer"] = w.astype(dtype)
    for name, shape in _conv_shapes(cfg).items():
        fan_in = shape[1] * shape[2] * shape[3]
        params[f"{name}.w"] = ad.kaiming_uniform(rng, shape, fan_in, dtype)
        params[f"{name}.b"] = np.zeros(shape[0], dtype=dtype)
    return params


def init_dense(params: dict, name: str, fan_in: int, fan_out: int, rng, dtype, bias=True):
    params[f"{name}.w"] = ad.kaiming_uniform(rng, (fan_in, fan_out), fan_in, dtype)
    if bias:
        params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)


def init_classifier_params(cfg: ClassifierConfig, rng: np.random.Generator) -> dict:
    params = init_backbone(cfg, rng)
    dtype = np.dtype(cfg.dtype)
    widths = (cfg.flat_features, *cfg.fc_widths)
    for i in range(3):
        init_dense(params, f"fc{i + 1}", widths[i], widths[i + 1], rng, dtype)
    return params


# ---------------------------------------------------------------- forward

def skeleton_transform(coords, weight) -> Tensor:
    """Mix N joints into M new ones: ``out[..., t, :, c] = Wᵀ · in[..., t, :, c]``.

    ``coords`` is ``...×T×N×3`` (joint axis second to last); ``weight`` is N×M.
    Implemented as a bias-free dense layer over the joint axis.
    """
    x = ad.as_tensor(coords)
    w = ad.as_tensor(weight)
    if x.shape[-2] != w.shape[0]:
        raise ad.ShapeError(f"skeleton_transform: {x.shape[-2]} joints vs weight {w.shape}")
    lead = x.shape[:-2]
    nd = x.data.ndim
    # move xyz in front of the joint axis so joints are last
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    xt = ad.transpose(x, perm)
    flat = ad.reshape(xt, (-1, w.shape[0]))
    y = ad.dense(flat, w)
    y = ad.reshape(y, (*lead, 3, w.shape[1]))
    return ad.transpose(y, perm)


def _conv_block(x, params, name, pool=True):
    y = ad.relu(ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=1, padding=1))
    return ad.max_pool2d(y, 2) if pool else y


def backbone(params: dict, cfg: ClassifierConfig, x) -> Tensor:
    """Features after the last conv stage, merged over persons by maxout.

    ``x`` is ``B×P×2×T×N×3``; returns ``B×C×T/8×M/8``.
    """
    x = np.asarray(x, dtype=np.dtype(cfg.dtype))
    if x.ndim != 6 or x.shape[2] != 2 or x.shape[4] != cfg.n_joints or x.shape[5] != 3:
        raise ad.ShapeError(f"expected B×P×2×T×{cfg.n_joints}×3 input, got {x.shape}")
    B, P, _, T, N, _ = x.shape
    x = x[:, :, :cfg.streams].reshape(B * P, cfg.streams, T, N, 3)
    xt = Tensor(x)
    if cfg.use_transformer:
        xt = skeleton_transform(xt, params["transformer"])
    M = xt.shape[3]
    # (BP, S, T, M, 3) -> (BP, S, 3, T, M)
    img = ad.transpose(xt, (0, 1, 4, 2, 3))
    names = ["coord", "motion"][:cfg.streams]
    streams = [ad.getitem(img, (slice(None), s)) for s in range(cfg.streams)]

    if cfg.fusion == "early":
        first = [_conv_block(s, params, f"conv1_{n}", pool=False) for s, n in zip(streams, names)]
        h = first[0] if len(first) == 1 else ad.concat(first, axis=1)
        h = ad.max_pool2d(h, 2)
        h = _conv_block(h, params, "conv2")
        h = _conv_block(h, params, "conv3")
    else:
        outs = []
        for s, n in zip(streams, names):
            h = _conv_block(s, params, f"conv1_{n}")
            h = _conv_block(h, params, f"conv2_{n}")
            outs.append(_conv_block(h, params, f"conv3_{n}"))
        h = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)

    C, Hh, Ww = h.shape[1:]
    h = ad.reshape(h, (B, P, C, Hh, Ww))
    merged = ad.getitem(h, (slice(None), 0))
    for p in range(1, P):
        merged = ad.max_elementwise(merged, ad.getitem(h, (slice(None), p)))
    return merged


def fc_head(params: dict, feats: Tensor, prefix="fc") -> Tensor:
    h = ad.relu(ad.dense(feats, params[f"{prefix}1.w"], params[f"{prefix}1.b"]))
    h = ad.relu(ad.dense(h, params[f"{prefix}2.w"], params[f"{prefix}2.b"]))
    return ad.dense(h, params[f"{prefix}3.w"], params[f"{prefix}3.b"])


class SkeletonClassifier:
    def __init__(self, config: ClassifierConfig, params: dict):
        self.config = config
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}

    @classmethod
    def create(cls, config: ClassifierConfig, rng_seed: int = 0) -> "SkeletonClassifier":
        return cls(config, init_classifier_params(config, np.random.default_rng(rng_seed)))

    @classmethod
    def from_checkpoint(cls, ck: ModelCheckpoint) -> "SkeletonClassifier":
        if ck.kind != "classifier":
            raise ad.CheckpointError(f"expected a classifier checkpoint, got {ck.kind!r}")
        return cls(ClassifierConfig.from_dict(ck.config), ck.params)

    def checkpoint(self, **extra) -> ModelCheckpoint:
        return ModelCheckpoint("classifier", self.config.to_dict(),
                               {k: v.data.copy() for k, v in self.params.items()}, extra)

    def requires_grad_(self, flag=True):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def logits(self, x) -> Tensor:
        feats = backbone(self.params, self.config, x)
        flat = ad.reshape(feats, (feats.shape[0], -1))
        if flat.shape[1] != self.config.flat_features:
            raise ad.ShapeError(f"flattened features {flat.shape[1]} != {self.config.flat_features}; "
                                f"inputs must have t_fixed={self.config.t_fixed} frames")
        return fc_head(self.params, flat)


def pairs_to_input(pairs) -> np.ndarray:
    """Stack per-person :class:`SkeletonImagePair` streams into a 1×P×2×T×N×3 batch."""
    return np.stack([np.stack([p.coords, p.motion]) for p in pairs])[None]


def forward_classify(pairs, model: SkeletonClassifier) -> np.ndarray:
    """Class logits for one sample given its per-person image pairs."""
    if isinstance(pairs, (list, tuple)) and pairs and isinstance(pairs[0], SkeletonImagePair):
        x = pairs_to_input(pairs)
    else:
        x = np.asarray(pairs)
        if x.ndim == 5:
            x = x[None]
    return model.logits(x).data[0]


def count_parameters(model) -> int:
    params = model.params if hasattr(model, "params") else model
    return int(sum(np.asarray(p.data if isinstance(p, Tensor) else p).size for p in params.values()))


# ---------------------------------------------------------------- training

def encode_dataset(sequences, cfg: ClassifierConfig) -> tuple:
    X = np.stack([encode_sequence(s, cfg.t_fixed, cfg.p_fixed) for s in sequences]).astype(cfg.dtype)
    y = np.array([-1 if s.label is None else s.label for s in sequences], dtype=np.int64)
    return X, y


def evaluate_arrays(model: SkeletonClassifier, X, y, batch_size=64) -> tuple:
    """(mean loss, accuracy, predictions) without building a graph."""
    model.requires_grad_(False)
    losses, preds = [], []
    for i in range(0, len(X), batch_size):
        logits = model.logits(X[i:i + batch_size])
        losses.append(ad.softmax_cross_entropy(logits, y[i:i + batch_size]).item() * len(logits.data))
        preds.append(np.argmax(logits.data, axis=1))
    preds = np.concatenate(preds)
    return float(np.sum(losses) / len(X)), float(np.mean(preds == y)), preds


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    stop_at_train_accuracy: float | None = None  # early exit once reached
    eval_every: int = 1

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    metrics: list = field(default_factory=list)
    model: SkeletonClassifier | None = None


def train_classifier(dataset, config: ClassifierConfig, sgd: SgdConfig, rng_seed: int,
                     val=None, train_cfg: TrainConfig | None = None, on_epoch=None) -> TrainResult:
    """Train from scratch; keep the parameters with the best validation accuracy.

    Without ``val`` the training accuracy selects the checkpoint. Everything
    random (init, shuffling) flows from ``rng_seed``.
    """
    train_cfg = train_cfg or TrainConfig()
    if not len(dataset):
        raise ValueError("training dataset is empty")
    X, y = encode_dataset(dataset, config)
    if (y < 0).any() or (y >= config.class_count).any():
        raise ValueError(f"labels must lie in [0, {config.class_count})")
    Xv = yv = None
    if val is not None and len(val):
        Xv, yv = encode_dataset(val, config)

    rng = np.random.default_rng(rng_seed)
    model = SkeletonClassifier(config, init_classifier_params(config, rng))
    state = None
    metrics = []
    best_acc, best_params = -1.0, None
    for epoch in range(train_cfg.epochs):
        lr = sgd.lr_at(epoch)
        model.requires_grad_(True)
        order = rng.permutation(len(X))
        running = 0.0
        for i in range(0, len(X), train_cfg.batch_size):
            idx = order[i:i + train_cfg.batch_size]
            loss = ad.softmax_cross_entropy(model.logits(X[idx]), y[idx])
            ad.backward(loss)
            state = ad.sgd_step(model.params, sgd, state, lr=lr)
            running += loss.item() * len(idx)
        rec = {"epoch": epoch, "lr": lr, "train_loss_running": running / len(X)}
        last = epoch == train_cfg.epochs - 1
        if (epoch + 1) % train_cfg.eval_every == 0 or last:
            rec["train_loss"], rec["train_acc"], _ = evaluate_arrays(model, X, y)
            if Xv is not None:
                rec["val_loss"], rec["val_acc"], _ = evaluate_arrays(model, Xv, yv)
            sel = rec.get("val_acc", rec["train_acc"])
            if sel > best_acc:
                best_acc = sel
                best_params = {k: v.data.copy() for k, v in model.params.items()}
                rec["best"] = True
        metrics.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %s", rec)
        stop = train_cfg.stop_at_train_accuracy
        if stop is not None and rec.get("train_acc", 0.0) >= stop and (Xv is None or "val_acc" in rec):
            break
    best = SkeletonClassifier(config, best_params if best_params is not None else
                              {k: v.data.copy() for k, v in model.params.items()})
    ck = best.checkpoint(best_selection_accuracy=best_acc, epochs_run=len(metrics), seed=rng_seed,
                         sgd=asdict(sgd), train=train_cfg.to_dict())
    return TrainResult(ck, metrics, best)


def predict(seq: SkeletonSequence, checkpoint) -> tuple:
    """(class id, softmax scores); ties go to the lowest class id."""
    model = checkpoint if isinstance(checkpoint, SkeletonClassifier) else SkeletonClassifier.from_checkpoint(checkpoint)
    cfg = model.config
    if seq.n_joints != cfg.n_joints:
        raise ValueError(f"sequence has {seq.n_joints} joints, model expects {cfg.n_joints}")
    model.requires_grad_(False)
    x = encode_sequence(seq, cfg.t_fixed, cfg.p_fixed)[None]
    scores = ad.softmax(model.logits(x).data[0].astype(np.float64))
    return int(np.argmax(scores)), scores


def ablation_configs(base: ClassifierConfig) -> dict:
    """The four motion/transformer variants of a config."""
    out = {}
    for name, motion, trans in (("CNN", False, False), ("CNN+Motion", True, False),
                                ("CNN+Trans", False, True), ("CNN+Motion+Trans", True, True)):
        c = copy.deepcopy(base)
        c.use_motion, c.use_transformer = motion, trans
        if not trans:
            c.m_joints = c.n_joints
        out[name] = c
    return out
