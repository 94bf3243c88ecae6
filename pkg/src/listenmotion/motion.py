"""Facial-motion sequence types, differential features, normalization, smooth-L1.

A motion frame is the concatenation of 3DMM expression coefficients and a
3-component axis-angle head rotation; a sequence stacks T frames row-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

ROTATION_DIMS = 3
STD_FLOOR = 1e-6


def wrap_angles(x: np.ndarray) -> np.ndarray:
    """Wrap angles into [-pi, pi]."""
    return np.mod(np.asarray(x) + np.pi, 2.0 * np.pi) - np.pi


def _as_frames(arr, name: str = "frames") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidInput(f"{name} must be a nonempty T-by-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class MotionFrame:
    """One frame: expression coefficients plus axis-angle rotation (radians)."""

    expression: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        expr = np.asarray(self.expression, dtype=np.float32)
        rot = wrap_angles(np.asarray(self.rotation, dtype=np.float32)).astype(np.float32)
        if rot.shape != (ROTATION_DIMS,):
            raise InvalidInput(f"rotation must have {ROTATION_DIMS} components")
        if not (np.all(np.isfinite(expr)) and np.all(np.isfinite(rot))):
            raise InvalidInput("frame contains non-finite values")
        object.__setattr__(self, "expression", expr)
        object.__setattr__(self, "rotation", rot)

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.expression, self.rotation])


@dataclass(frozen=True)
class MotionSequence:
    """T-by-d_f matrix of per-frame coefficients at a fixed frame rate."""

    frames: np.ndarray
    fps: int

    def __post_init__(self):
        object.__setattr__(self, "frames", _as_frames(self.frames))
        if int(self.fps) <= 0:
            raise InvalidInput("fps must be positive")
        object.__setattr__(self, "fps", int(self.fps))

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class DifferentialSequence:
    """Per-frame first differences; row 0 is zero so length matches the source."""

    deltas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "deltas", _as_frames(self.deltas, "deltas"))

    def __len__(self) -> int:
        return self.deltas.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-dimension z-score statistics; std is floored at STD_FLOOR."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def compute_differential(seq: MotionSequence) -> DifferentialSequence:
    """First differences of the frames, zero-padded at the first row."""
    frames = seq.frames
    deltas = np.diff(frames, axis=0, prepend=frames[:1])
    return DifferentialSequence(deltas=deltas)


def smooth_l1(pred, target) -> float:
    """Mean smooth-L1: 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise, x = pred - target."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {target.shape}")
    x = np.abs(pred - target)
    return float(np.mean(np.where(x < 1.0, 0.5 * x * x, x - 0.5)))


def fit_norm_stats(dataset: list[MotionSequence]) -> NormStats:
    if not dataset:
        raise InvalidInput("cannot fit normalization statistics on an empty dataset")
    stacked = np.concatenate([s.frames.astype(np.float64) for s in dataset], axis=0)
    return NormStats(mean=stacked.mean(axis=0), std=stacked.std(axis=0))


def normalize(seq: MotionSequence, stats: NormStats) -> MotionSequence:
    frames = (seq.frames.astype(np.float64) - stats.mean) / stats.std
    return MotionSequence(frames=frames.astype(np.float32), fps=seq.fps)


def denormalize(seq: MotionSequence, stats: NormStats) -> MotionSequence:
    frames = seq.frames.astype(np.float64) * stats.std + stats.mean
    return MotionSequence(frames=frames.astype(np.float32), fps=seq.fps)
