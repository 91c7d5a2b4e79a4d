"""Small reverse-mode autodiff engine on top of numpy.

Only the operators the classification and detection networks need are
provided. A ``Tensor`` records the tensors it was computed from together
with a closure that maps the output gradient to input gradients; calling
``backward`` on a scalar walks that DAG in reverse topological order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind not in "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar used by tests and losses
    def __add__(self, other):
        return add(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every upstream tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # intermediate grads are local to this pass; leaves accumulate across passes
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs, axis=0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def getitem(x: Tensor, index) -> Tensor:
    src_shape = x.shape
    dtype = x.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw, "getitem")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, factor: float) -> Tensor:
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Tensor) -> Tensor:
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


# ---------------------------------------------------------------- layers

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` for a B×F_in input and F_in×F_out weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, bw, "dense")


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of a B×C×H×W input with a K×C×kh×kw kernel."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    K, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input {x.shape} has {C} channels, kernel {kernel.shape} expects {Ck}")
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError(f"conv2d: input {x.shape} with padding {(ph, pw)} smaller than kernel {kernel.shape}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(K, -1)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, K)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def max_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise maximum; on ties the gradient goes to ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"max_elementwise: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (g * take_a, g * ~take_a), "max")


def max_pool2d(x: Tensor, window=2, stride=None) -> Tensor:
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    B, C, H, W = x.shape
    if H < kh or W < kw:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than window {(kh, kw)}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kh * kw)
    # argmax returns the first maximum: ties route gradient to the earliest cell
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        di, dj = np.divmod(arg, kw)
        rows = np.arange(Ho)[:, None] * sh + di
        cols = np.arange(Wo)[None, :] * sw + dj
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return _make(out, (x,), bw, "max_pool2d")


# ---------------------------------------------------------------- losses

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of B×C logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, C = logits.shape
    if B and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = (logsum - z[rows, labels]).sum() / max(B, 1)

    def bw(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * (g / max(B, 1)),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_xent")


def smooth_l1(pred: Tensor, target, inside_weights=None, normalizer=None) -> Tensor:
    """Huber loss with unit transition point, summed and divided by ``normalizer``.

    ``normalizer`` defaults to the number of rows of ``pred``.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    w = np.ones_like(pred.data) if inside_weights is None else np.asarray(inside_weights, dtype=pred.dtype)
    if normalizer is None:
        normalizer = pred.shape[0] if pred.data.ndim else 1
    normalizer = max(float(normalizer), 1.0)
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    val = np.where(small, 0.5 * d * d, ad - 0.5)
    loss = (w * val).sum() / normalizer

    def bw(g):
        return (g * w * np.where(small, d, np.sign(d)) / normalizer,)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), bw, "smooth_l1")


# ---------------------------------------------------------------- optimisation

@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step_size: int = 0  # epochs between decays; 0 disables the schedule
    gamma: float = 0.1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def lr_at(self, epoch: int) -> float:
        if self.step_size <= 0:
            return self.learning_rate
        return self.learning_rate * self.gamma ** (epoch // self.step_size)


def sgd_step(params: dict, config: SgdConfig, state: dict | None = None, lr: float | None = None) -> dict:
    """Momentum SGD (``v = m*v + g + wd*p; p -= lr*v``), then clear grads.

    ``state`` carries the velocities between calls and is returned; ``lr``
    overrides ``config.learning_rate`` for schedules.
    """
    state = {} if state is None else state
    lr = config.learning_rate if lr is None else lr
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad + config.weight_decay * p.data if config.weight_decay else p.grad
        v = state.setdefault(name, np.zeros_like(p.data))
        v *= config.momentum
        v += g
        if lr:
            p.data -= (lr * v).astype(p.data.dtype)
        p.grad = None
    return state


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    """Architecture config plus named parameter arrays.

    Stored as one ``.npz`` archive; the JSON header (``version``, ``kind``,
    ``config``, ``extra``) sits in the ``__header__`` entry and each
    parameter in ``param/<name>``.
    """

    kind: str
    config: dict
    params: dict
    extra: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        path = Path(path)
        header = {"version": CHECKPOINT_VERSION, "kind": self.kind, "config": self.config, "extra": self.extra}
        blobs = {f"param/{k}": np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **blobs)
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        try:
            z = np.load(path)
        except (OSError, ValueError) as e:
            raise CheckpointError(f"{path}: not a checkpoint ({e})") from None
        with z:
            if "__header__" not in z:
                raise CheckpointError(f"{path}: missing header")
            header = json.loads(bytes(z["__header__"]).decode())
            params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
        return cls(header["kind"], header["config"], params, header.get("extra", {}))
