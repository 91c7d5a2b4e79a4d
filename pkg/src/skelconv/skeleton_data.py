"""Skeleton sequences and their encoding as T×N×3 images.

Raw coordinates are never normalised. The only transformation applied to a
sequence before it reaches a network is the temporal resize.
"""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .windows import Window, WindowSet

log = logging.getLogger(__name__)

NTU_JOINTS = 25
FORMAT_MAGIC = "skelseq"
FORMAT_VERSION = 1


class SkeletonParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SkeletonDataError(ValueError):
    pass


class PersonTruncationWarning(UserWarning):
    pass


class Joint(NamedTuple):
    x: float
    y: float
    z: float


@dataclass
class SkeletonFrame:
    """One person at one time step; ``joints`` is an N×3 array."""

    joints: np.ndarray
    person_id: int = 0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise SkeletonDataError(f"joints must be N×3, got {self.joints.shape}")
        if not np.isfinite(self.joints).all():
            raise SkeletonDataError("joint coordinates must be finite")
        if self.person_id < 0:
            raise SkeletonDataError("person_id must be >= 0")

    def joint(self, i) -> Joint:
        return Joint(*map(float, self.joints[i]))


@dataclass
class SkeletonSequence:
    frames: list  # T entries, each a list of SkeletonFrame
    fps: float = 30.0
    label: int | None = None
    segments: WindowSet | None = None
    seq_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise SkeletonDataError("a sequence needs at least one frame")
        n = None
        for t, step in enumerate(self.frames):
            for person in step:
                if n is None:
                    n = person.joints.shape[0]
                elif person.joints.shape[0] != n:
                    raise SkeletonDataError(
                        f"frame {t}: {person.joints.shape[0]} joints, sequence has {n}")
        if n is None:
            raise SkeletonDataError("sequence contains no persons")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_joints(self) -> int:
        for step in self.frames:
            if step:
                return step[0].joints.shape[0]
        raise SkeletonDataError("sequence contains no persons")

    @property
    def max_persons(self) -> int:
        return max(len(step) for step in self.frames)

    def person_ids(self) -> list:
        return sorted({p.person_id for step in self.frames for p in step})

    @classmethod
    def from_array(cls, arr, **kw) -> "SkeletonSequence":
        """Build from a dense ``T×P×N×3`` (or ``T×N×3`` single-person) array."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[:, None]
        frames = [[SkeletonFrame(arr[t, p], p) for p in range(arr.shape[1])] for t in range(arr.shape[0])]
        return cls(frames, **kw)

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        if (self.fps, self.label, self.seq_id, len(self.frames)) != (other.fps, other.label, other.seq_id, len(other.frames)):
            return False
        for a, b in zip(self.frames, other.frames):
            if len(a) != len(b):
                return False
            for pa, pb in zip(a, b):
                if pa.person_id != pb.person_id or not np.array_equal(pa.joints, pb.joints):
                    return False
        sa = [] if self.segments is None else list(self.segments)
        sb = [] if other.segments is None else list(other.segments)
        return sa == sb


@dataclass
class SkeletonImagePair:
    """Coordinate and motion streams of one person, both T×N×3."""

    coords: np.ndarray
    motion: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.motion is None:
            self.motion = compute_motion(self.coords)
        if self.coords.shape != self.motion.shape:
            raise SkeletonDataError("coords and motion must have identical shape")


# ---------------------------------------------------------------- parsing

def _read_text(src):
    if isinstance(src, Path):
        return src.read_text()
    if hasattr(src, "read"):
        return src.read()
    return src


def parse_ntu_skeleton(text, n_joints=NTU_JOINTS, seq_id="") -> SkeletonSequence:
    """Parse the NTU RGB+D ``.skeleton`` text layout.

    Body ids in the file are long tracking ids; persons are numbered by the
    order in which a tracking id first appears.
    """
    lines = _read_text(text).splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise SkeletonParseError("frame count mismatch: unexpected end of file", pos + 1)
        pos += 1
        return pos, lines[pos - 1].split()

    def as_int(tok, lineno, what):
        try:
            return int(tok)
        except ValueError:
            raise SkeletonParseError(f"non-numeric {what} {tok!r}", lineno) from None

    lineno, toks = next_line()
    if len(toks) != 1:
        raise SkeletonParseError("malformed header: expected a single frame count", lineno)
    n_frames = as_int(toks[0], lineno, "frame count")
    if n_frames < 1:
        raise SkeletonParseError("malformed header: frame count must be >= 1", lineno)

    track_ids = {}
    frames = []
    for _ in range(n_frames):
        try:
            lineno, toks = next_line()
        except SkeletonParseError as e:
            raise SkeletonParseError("frame count mismatch", e.line) from None
        n_bodies = as_int(toks[0], lineno, "body count")
        step = []
        for _ in range(n_bodies):
            lineno, toks = next_line()
            if not toks:
                raise SkeletonParseError("missing body info line", lineno)
            pid = track_ids.setdefault(toks[0], len(track_ids))
            lineno, toks = next_line()
            count = as_int(toks[0], lineno, "joint count")
            if count != n_joints:
                raise SkeletonParseError(f"inconsistent joint count {count}, expected {n_joints}", lineno)
            joints = np.empty((n_joints, 3))
            for j in range(n_joints):
                lineno, toks = next_line()
                if len(toks) < 3:
                    raise SkeletonParseError(f"joint line needs >= 3 fields, got {len(toks)}", lineno)
                try:
                    joints[j] = [float(t) for t in toks[:3]]
                except ValueError:
                    raise SkeletonParseError(f"non-numeric joint field in {toks[:3]}", lineno) from None
            step.append(SkeletonFrame(joints, pid))
        frames.append(step)

    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos < len(lines):
        raise SkeletonParseError(f"frame count mismatch: trailing data after {n_frames} frames", pos + 1)
    return SkeletonSequence(frames, seq_id=seq_id)


def parse_pkummd_labels(text) -> WindowSet:
    """Parse ``class_id,start,end,confidence`` rows into windows sorted by start.

    Rows with ``start >= end`` are skipped and counted in ``meta["rejected"]``.
    """
    out = []
    rejected = 0
    for lineno, line in enumerate(_read_text(text).splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < 3:
            raise SkeletonParseError(f"expected class_id,start,end,confidence, got {line!r}", lineno)
        try:
            cls = int(float(fields[0]))
            start, end = float(fields[1]), float(fields[2])
            conf = float(fields[3]) if len(fields) > 3 and fields[3] else 1.0
        except ValueError:
            raise SkeletonParseError(f"non-numeric field in {line!r}", lineno) from None
        if start >= end:
            rejected += 1
            continue
        out.append(Window(start, end, conf, cls))
    if rejected:
        log.warning("rejected %d label rows with start >= end", rejected)
    out.sort(key=lambda w: (w.start, w.end))
    return WindowSet(out, {"rejected": rejected})


def format_pkummd_labels(windows) -> str:
    return "".join(f"{w.class_id},{_num(w.start)},{_num(w.end)},{_num(w.score)}\n" for w in windows)


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def dump_sequence(seq: SkeletonSequence, fh=None) -> str:
    """Serialise to the internal line-delimited text format.

    Layout::

        skelseq 1
        T <frames> N <joints> P <max persons> fps <fps> label <label|-> id <seq_id|->
        segments <K>
        <class_id> <start> <end> <score>        (K lines)
        <t> <person_id> <joint> <x> <y> <z>     (one row per joint)
    """
    buf = io.StringIO()
    label = "-" if seq.label is None else str(seq.label)
    sid = seq.seq_id or "-"
    buf.write(f"{FORMAT_MAGIC} {FORMAT_VERSION}\n")
    buf.write(f"T {seq.n_frames} N {seq.n_joints} P {seq.max_persons} fps {float(seq.fps)!r} label {label} id {sid}\n")
    segs = [] if seq.segments is None else list(seq.segments)
    buf.write(f"segments {len(segs) if seq.segments is not None else -1}\n")
    for w in segs:
        buf.write(f"{w.class_id} {float(w.start)!r} {float(w.end)!r} {float(w.score)!r}\n")
    for t, step in enumerate(seq.frames):
        for person in step:
            for j, (x, y, z) in enumerate(person.joints):
                buf.write(f"{t} {person.person_id} {j} {float(x)!r} {float(y)!r} {float(z)!r}\n")
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def load_sequence(text) -> SkeletonSequence:
    lines = _read_text(text).splitlines()
    if not lines or lines[0].split() != [FORMAT_MAGIC, str(FORMAT_VERSION)]:
        raise SkeletonParseError(f"expected '{FORMAT_MAGIC} {FORMAT_VERSION}' header", 1)
    head = lines[1].split()
    try:
        kv = dict(zip(head[::2], head[1::2]))
        T, N = int(kv["T"]), int(kv["N"])
        fps = float(kv["fps"])
        label = None if kv["label"] == "-" else int(kv["label"])
        sid = "" if kv.get("id", "-") == "-" else kv["id"]
        n_seg = int(lines[2].split()[1])
    except (KeyError, ValueError, IndexError):
        raise SkeletonParseError("malformed sequence header", 2) from None
    segs = []
    for k in range(max(n_seg, 0)):
        c, s, e, sc = lines[3 + k].split()
        segs.append(Window(float(s), float(e), float(sc), int(c)))
    body = lines[3 + max(n_seg, 0):]
    rows = np.loadtxt(body, ndmin=2) if body else np.zeros((0, 6))
    if rows.shape[1] != 6:
        raise SkeletonParseError("joint rows need 6 fields", 4 + max(n_seg, 0))
    frames = [dict() for _ in range(T)]
    for t, pid, j, x, y, z in rows:
        t, pid, j = int(t), int(pid), int(j)
        if not 0 <= t < T or not 0 <= j < N:
            raise SkeletonParseError(f"row index out of range: t={t} joint={j}")
        frames[t].setdefault(pid, np.empty((N, 3)))[j] = (x, y, z)
    steps = [[SkeletonFrame(arr, pid) for pid, arr in step.items()] for step in frames]
    return SkeletonSequence(steps, fps=fps, label=label,
                            segments=WindowSet(segs) if n_seg >= 0 else None, seq_id=sid)


# ---------------------------------------------------------------- preprocessing

def person_tracks(seq: SkeletonSequence) -> tuple:
    """Dense ``P×T×N×3`` array over all person ids plus a presence mask ``P×T``.

    Absent entries hold zeros and are flagged False in the mask.
    """
    ids = seq.person_ids()
    index = {pid: k for k, pid in enumerate(ids)}
    T, N = seq.n_frames, seq.n_joints
    data = np.zeros((len(ids), T, N, 3))
    present = np.zeros((len(ids), T), dtype=bool)
    for t, step in enumerate(seq.frames):
        for person in step:
            data[index[person.person_id], t] = person.joints
            present[index[person.person_id], t] = True
    return ids, data, present


def resize_array(arr: np.ndarray, t_fixed: int) -> np.ndarray:
    """Corner-aligned linear resize of axis 0."""
    if t_fixed < 1:
        raise ValueError(f"t_fixed must be >= 1, got {t_fixed}")
    T = arr.shape[0]
    if T == t_fixed:
        return arr.copy()
    if T == 1:
        return np.repeat(arr, t_fixed, axis=0)
    if t_fixed == 1:
        return arr[:1].copy()
    pos = np.arange(t_fixed) * (T - 1) / (t_fixed - 1)
    lo = np.minimum(np.floor(pos).astype(int), T - 2)
    frac = (pos - lo).reshape((-1,) + (1,) * (arr.ndim - 1))
    return arr[lo] * (1 - frac) + arr[lo + 1] * frac


def resize_temporal(seq: SkeletonSequence, t_fixed: int) -> SkeletonSequence:
    """Resize a sequence to exactly ``t_fixed`` frames.

    A person missing from one of the two source frames of an output step is
    taken from the other source frame alone (a source frame with zero weight
    does not count); segments are rescaled by the
    length ratio.
    """
    if t_fixed < 1:
        raise ValueError(f"t_fixed must be >= 1, got {t_fixed}")
    T = seq.n_frames
    if T == t_fixed:
        return SkeletonSequence([list(step) for step in seq.frames], seq.fps, seq.label, seq.segments, seq.seq_id)
    ids, data, present = person_tracks(seq)
    if T == 1 or t_fixed == 1:
        src = np.zeros(t_fixed, dtype=int) if T == 1 else np.zeros(1, dtype=int)
        lo, hi, frac = src, src, np.zeros(t_fixed)
    else:
        pos = np.arange(t_fixed) * (T - 1) / (t_fixed - 1)
        lo = np.minimum(np.floor(pos).astype(int), T - 2)
        hi = lo + 1
        frac = pos - lo
    frames = []
    for i in range(t_fixed):
        step = []
        for k, pid in enumerate(ids):
            # a source frame with zero weight contributes nobody
            a = present[k, lo[i]] and frac[i] < 1
            b = present[k, hi[i]] and frac[i] > 0
            if a and b:
                joints = data[k, lo[i]] * (1 - frac[i]) + data[k, hi[i]] * frac[i]
            elif a:
                joints = data[k, lo[i]]
            elif b:
                joints = data[k, hi[i]]
            else:
                continue
            step.append(SkeletonFrame(joints, pid))
        frames.append(step)
    segments = None
    if seq.segments is not None:
        ratio = t_fixed / T
        segments = WindowSet([w.with_(start=w.start * ratio, end=w.end * ratio) for w in seq.segments],
                             dict(seq.segments.meta))
    return SkeletonSequence(frames, seq.fps * t_fixed / T, seq.label, segments, seq.seq_id)


def compute_motion(coords: np.ndarray) -> np.ndarray:
    """Frame-to-frame joint displacement; the last frame is zero-padded."""
    coords = np.asarray(coords)
    if coords.ndim < 1 or coords.shape[0] < 1:
        raise SkeletonDataError(f"motion needs at least one frame, got shape {coords.shape}")
    out = np.zeros_like(coords)
    out[:-1] = coords[1:] - coords[:-1]
    return out


def regularize_persons(seq: SkeletonSequence, p_fixed: int) -> list:
    """Exactly ``p_fixed`` per-person image pairs, ordered by person id.

    Extra persons beyond the ``p_fixed`` lowest ids are dropped with a
    :class:`PersonTruncationWarning`. A person absent at some frame takes the
    first present person's skeleton there; missing persons duplicate person 0.
    """
    if p_fixed < 1:
        raise ValueError(f"p_fixed must be >= 1, got {p_fixed}")
    for t, step in enumerate(seq.frames):
        if not step:
            raise SkeletonDataError(f"frame {t} has no persons")
    ids, data, present = person_tracks(seq)
    if len(ids) > p_fixed:
        warnings.warn(f"{len(ids)} persons in sequence {seq.seq_id or '?'}; keeping ids {ids[:p_fixed]}",
                      PersonTruncationWarning, stacklevel=2)
    # first-present person per frame, over all ids
    first = np.argmax(present, axis=0)
    fill = data[first, np.arange(seq.n_frames)]
    keep = min(len(ids), p_fixed)
    streams = []
    for k in range(keep):
        coords = np.where(present[k][:, None, None], data[k], fill)
        streams.append(coords)
    while len(streams) < p_fixed:
        streams.append(streams[0])
    return [SkeletonImagePair(c.copy()) for c in streams]


def encode_sequence(seq: SkeletonSequence, t_fixed: int | None, p_fixed: int) -> np.ndarray:
    """Network input of shape ``P×2×T×N×3`` (coordinate stream, motion stream).

    ``t_fixed=None`` keeps the original length (detection inputs). Motion is
    taken after the resize.
    """
    if t_fixed is not None:
        seq = resize_temporal(seq, t_fixed)
    pairs = regularize_persons(seq, p_fixed)
    return np.stack([np.stack([p.coords, p.motion]) for p in pairs])


def write_dataset(sequences, root, with_labels_csv=False) -> Path:
    """Write ``<root>/sequences/<id>.skel`` (+ ``labels/<id>.txt``) and a manifest."""
    root = Path(root)
    (root / "sequences").mkdir(parents=True, exist_ok=True)
    if with_labels_csv:
        (root / "labels").mkdir(exist_ok=True)
    manifest = []
    for i, seq in enumerate(sequences):
        sid = seq.seq_id or f"seq{i:05d}"
        seq.seq_id = sid
        (root / "sequences" / f"{sid}.skel").write_text(dump_sequence(seq))
        if with_labels_csv:
            (root / "labels" / f"{sid}.txt").write_text(format_pkummd_labels(seq.segments or []))
        manifest.append({"id": sid, "label": seq.label, "frames": seq.n_frames})
    (root / "manifest.json").write_text(json.dumps({"sequences": manifest}, indent=1))
    return root


def read_dataset(root) -> list:
    """Read back a dataset written by :func:`write_dataset`.

    When a ``labels/`` directory is present its CSVs override the segments
    stored in the sequence files.
    """
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for entry in manifest["sequences"]:
        seq = load_sequence((root / "sequences" / f"{entry['id']}.skel").read_text())
        labels = root / "labels" / f"{entry['id']}.txt"
        if labels.exists():
            seq.segments = parse_pkummd_labels(labels.read_text())
        out.append(seq)
    return out
