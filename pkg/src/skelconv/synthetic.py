"""Deterministic synthetic skeleton data.

Each class is a fixed set of sinusoidal joint trajectories drawn from
``pattern_seed``; ``rng_seed`` only drives the per-instance variation, so two
datasets made with different ``rng_seed`` share their class definitions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .skeleton_data import SkeletonSequence
from .windows import Window, WindowSet


@dataclass
class SynthConfig:
    n_classes: int = 4
    per_class: int = 10
    n_joints: int = 25
    mode: str = "trimmed"  # or "untrimmed"
    length_range: tuple = (40, 80)  # trimmed sequence length
    persons_range: tuple = (1, 2)
    noise: float = 0.01
    fps: float = 30.0
    active_joints: int = 6
    amplitude_range: tuple = (0.2, 0.5)
    frequency_range: tuple = (0.4, 1.6)  # Hz, spread over classes
    # untrimmed mode
    n_sequences: int = 20
    segments_range: tuple = (2, 4)
    segment_length_range: tuple = (40, 120)
    gap_range: tuple = (20, 80)
    background_amplitude: float = 0.02
    pattern_seed: int = 0

    def __post_init__(self):
        for name in ("length_range", "persons_range", "amplitude_range", "frequency_range",
                     "segments_range", "segment_length_range", "gap_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (type(lo)(lo), type(hi)(hi)))
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: invalid range ({lo}, {hi})")
        if self.mode not in ("trimmed", "untrimmed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_classes < 1 or self.per_class < 1 or self.n_sequences < 1:
            raise ValueError("class and sequence counts must be >= 1")
        if self.length_range[0] < 1 or self.persons_range[0] < 1 or self.segment_length_range[0] < 2:
            raise ValueError("lengths and person counts must be positive")
        if not 1 <= self.active_joints <= self.n_joints:
            raise ValueError("active_joints must lie in [1, n_joints]")
        if self.noise < 0 or self.background_amplitude < 0:
            raise ValueError("noise levels must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class ClassPattern:
    rest: np.ndarray  # N×3
    amplitude: np.ndarray  # K×N×3, zero on inactive joints
    frequency: np.ndarray  # K, Hz
    phase: np.ndarray  # K×N


def class_patterns(cfg: SynthConfig) -> ClassPattern:
    rng = np.random.default_rng(cfg.pattern_seed)
    N, K = cfg.n_joints, cfg.n_classes
    # a loose standing figure roughly 1.7 m tall, centred on the origin
    rest = np.stack([
        rng.uniform(-0.3, 0.3, N),
        np.linspace(0.9, -0.8, N) + rng.normal(0, 0.05, N),
        rng.normal(0, 0.05, N),
    ], axis=1)
    amp = np.zeros((K, N, 3))
    for k in range(K):
        joints = rng.choice(N, size=cfg.active_joints, replace=False)
        dirs = rng.normal(size=(cfg.active_joints, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        amp[k, joints] = dirs * rng.uniform(*cfg.amplitude_range, size=(cfg.active_joints, 1))
    lo, hi = cfg.frequency_range
    freq = np.linspace(lo, hi, K) if K > 1 else np.array([0.5 * (lo + hi)])
    freq = freq[rng.permutation(K)]
    phase = rng.uniform(0, 2 * np.pi, size=(K, N))
    return ClassPattern(rest, amp, freq, phase)


def _action(pat: ClassPattern, k: int, n: int, rng, fps: float) -> np.ndarray:
    """``n`` frames of class ``k`` around the origin (offsets only)."""
    t = np.arange(n) / fps
    f = pat.frequency[k] * rng.uniform(0.9, 1.1)
    a = rng.uniform(0.8, 1.2)
    phi0 = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * f * t[:, None] + pat.phase[k][None, :] + phi0)  # n×N
    return a * wave[:, :, None] * pat.amplitude[k][None]


def _persons(pose: np.ndarray, motion: np.ndarray, n_persons: int, rng) -> np.ndarray:
    """T×P×N×3 array: person 0 does ``motion``, others mirror it at half amplitude."""
    out = [pose + motion]
    for p in range(1, n_persons):
        shift = np.array([0.9 * p, 0.0, rng.uniform(-0.1, 0.1)])
        out.append(pose + shift + 0.5 * motion)
    return np.stack(out, axis=1)


def synthesize_dataset(cfg: SynthConfig, rng_seed: int) -> list:
    """Generate trimmed labelled clips or untrimmed sequences with segments.

    Trimmed labels run ``0..n_classes-1``. Untrimmed segment classes run
    ``1..n_classes`` so that 0 stays free for background.
    """
    pat = class_patterns(cfg)
    rng = np.random.default_rng(rng_seed)
    N = cfg.n_joints
    out = []
    if cfg.mode == "trimmed":
        labels = np.repeat(np.arange(cfg.n_classes), cfg.per_class)
        for i, k in enumerate(labels):
            T = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
            P = int(rng.integers(cfg.persons_range[0], cfg.persons_range[1] + 1))
            offset = rng.uniform(-0.2, 0.2, size=3)
            motion = _action(pat, int(k), T, rng, cfg.fps)
            arr = _persons(pat.rest + offset, motion, P, rng) + rng.normal(0, cfg.noise, size=(T, P, N, 3))
            out.append(SkeletonSequence.from_array(arr, fps=cfg.fps, label=int(k), seq_id=f"cls{i:05d}"))
        return out

    for i in range(cfg.n_sequences):
        n_seg = int(rng.integers(cfg.segments_range[0], cfg.segments_range[1] + 1))
        P = int(rng.integers(cfg.persons_range[0], cfg.persons_range[1] + 1))
        offset = rng.uniform(-0.2, 0.2, size=3)
        pieces, segs, t = [], [], 0
        for s in range(n_seg + 1):
            gap = int(rng.integers(cfg.gap_range[0], cfg.gap_range[1] + 1))
            if gap:
                tt = np.arange(gap) / cfg.fps
                sway = cfg.background_amplitude * np.sin(2 * np.pi * 0.2 * (tt + t / cfg.fps))
                pieces.append(np.broadcast_to(sway[:, None, None], (gap, N, 3)))
                t += gap
            if s == n_seg:
                break
            k = int(rng.integers(1, cfg.n_classes + 1))
            L = int(rng.integers(cfg.segment_length_range[0], cfg.segment_length_range[1] + 1))
            pieces.append(_action(pat, k - 1, L, rng, cfg.fps))
            segs.append(Window(float(t), float(t + L), 1.0, k))
            t += L
        arr = _persons(pat.rest + offset, np.concatenate(pieces), P, rng) + rng.normal(0, cfg.noise, size=(t, P, N, 3))
        out.append(SkeletonSequence.from_array(arr, fps=cfg.fps, segments=WindowSet(segs), seq_id=f"det{i:05d}"))
    return out


def background_sequence(cfg: SynthConfig, length: int, rng_seed: int) -> SkeletonSequence:
    """An untrimmed sequence with no actions in it."""
    pat = class_patterns(cfg)
    rng = np.random.default_rng(rng_seed)
    tt = np.arange(length) / cfg.fps
    sway = cfg.background_amplitude * np.sin(2 * np.pi * 0.2 * tt)
    motion = np.broadcast_to(sway[:, None, None], (length, cfg.n_joints, 3))
    arr = _persons(pat.rest + rng.uniform(-0.2, 0.2, size=3), motion, cfg.persons_range[0], rng) + rng.normal(0, cfg.noise, size=(length, cfg.persons_range[0], cfg.n_joints, 3))
    return SkeletonSequence.from_array(arr, fps=cfg.fps, segments=WindowSet([]), seq_id="background")
