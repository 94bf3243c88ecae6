"""Evaluation suite: L2, Frechet distance, paired FD, diversity, variation.

The metric names follow the listener-generation literature; the exact
formulas here are this package's normative definitions. FD fits a Gaussian
to each per-frame feature cloud; the paired variant concatenates speaker and
listener frames to measure synchrony.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .motion import MotionSequence

COV_JITTER = 1e-6


@dataclass(frozen=True)
class FeatureCloud:
    """S-by-d matrix of pooled per-frame feature vectors."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 2:
            raise InvalidInput("feature cloud needs at least 2 rows")
        if not np.all(np.isfinite(rows)):
            raise InvalidInput("feature cloud contains non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def l2_metric(gen: list[MotionSequence], gt: list[MotionSequence]) -> float:
    """Mean over sequences of mean per-frame Euclidean distance."""
    if len(gen) != len(gt) or not gen:
        raise InvalidInput("l2_metric needs paired, nonempty sequence lists")
    per_seq = []
    for g, r in zip(gen, gt):
        if g.frames.shape != r.frames.shape:
            raise InvalidInput(f"shape mismatch: {g.frames.shape} vs {r.frames.shape}")
        diff = g.frames.astype(np.float64) - r.frames.astype(np.float64)
        per_seq.append(np.linalg.norm(diff, axis=1).mean())
    return float(np.mean(per_seq))


def matrix_sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; eigenvalues clamped at 0."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput("matrix_sqrt_psd expects a square matrix")
    if np.max(np.abs(a - a.T)) > 1e-8:
        raise InvalidInput("matrix_sqrt_psd expects a symmetric matrix")
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _gaussian_fit(cloud: FeatureCloud) -> tuple[np.ndarray, np.ndarray]:
    mu = cloud.rows.mean(axis=0)
    cov = np.cov(cloud.rows, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov) + COV_JITTER * np.eye(cloud.dim)
    return mu, cov


def frechet_distance(x: FeatureCloud, y: FeatureCloud) -> float:
    """Frechet distance between Gaussian fits of two feature clouds."""
    if x.dim != y.dim:
        raise InvalidInput(f"dimension mismatch: {x.dim} vs {y.dim}")
    mu_x, cov_x = _gaussian_fit(x)
    mu_y, cov_y = _gaussian_fit(y)
    # sqrt of the (non-symmetric) product via the similar symmetric matrix
    root_x = matrix_sqrt_psd(cov_x)
    cross = matrix_sqrt_psd(root_x @ cov_y @ root_x)
    val = float(np.sum((mu_x - mu_y) ** 2) + np.trace(cov_x + cov_y) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def _paired_cloud(pairs: list[tuple[MotionSequence, MotionSequence]]) -> FeatureCloud:
    rows = []
    for speaker, listener in pairs:
        if len(speaker) != len(listener):
            raise InvalidInput("speaker and listener in a pair must have equal frame counts")
        rows.append(np.concatenate([speaker.frames, listener.frames], axis=1))
    return FeatureCloud(rows=np.concatenate(rows, axis=0))


def paired_fd(gen: list[tuple[MotionSequence, MotionSequence]],
              gt: list[tuple[MotionSequence, MotionSequence]]) -> float:
    """FD between clouds of concatenated [speaker; listener] frames."""
    if not gen or not gt:
        raise InvalidInput("paired_fd needs nonempty pair lists")
    return frechet_distance(_paired_cloud(gen), _paired_cloud(gt))


def pooled_cloud(seqs: list[MotionSequence]) -> FeatureCloud:
    """Stack all frames of all sequences into one cloud."""
    if not seqs:
        raise InvalidInput("cannot pool an empty sequence list")
    return FeatureCloud(rows=np.concatenate([s.frames for s in seqs], axis=0))


def diversity(samples: list[MotionSequence]) -> float:
    """Mean over unordered sample pairs of mean per-frame distance."""
    if len(samples) < 2:
        raise InvalidInput("diversity needs at least 2 samples")
    vals = []
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            a, b = samples[i].frames, samples[j].frames
            if a.shape != b.shape:
                raise InvalidInput("diversity samples must share shapes")
            vals.append(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64), axis=1).mean())
    return float(np.mean(vals))


def variation(samples: list[MotionSequence]) -> float:
    """Mean over sequences of mean per-dimension temporal standard deviation."""
    if not samples:
        raise InvalidInput("variation needs at least one sequence")
    vals = []
    for s in samples:
        if len(s) < 2:
            raise InvalidInput("variation needs sequences with at least 2 frames")
        vals.append(s.frames.astype(np.float64).std(axis=0, ddof=0).mean())
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """All scalar metrics for one generated corpus against its reference."""

    l2: float
    fd: float
    pfd: float
    diversity: float
    variation: float
    gt_diversity: float
    gt_variation: float
    num_sequences: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "l2": self.l2, "fd": self.fd, "pfd": self.pfd,
            "diversity": self.diversity, "variation": self.variation,
            "gt_diversity": self.gt_diversity, "gt_variation": self.gt_variation,
            "diversity_gap": abs(self.diversity - self.gt_diversity),
            "variation_gap": abs(self.variation - self.gt_variation),
            "num_sequences": self.num_sequences,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Aligned text table; diversity/variation are judged by closeness to GT."""
        headers = ["", "L2", "FD", "P-FD", "Diversity", "Variation", "|Div-GT|", "|Var-GT|"]
        gt_row = ["GT", "", "", "", f"{self.gt_diversity:.4f}", f"{self.gt_variation:.4f}", "", ""]
        model_row = ["model", f"{self.l2:.4f}", f"{self.fd:.4f}", f"{self.pfd:.4f}",
                     f"{self.diversity:.4f}", f"{self.variation:.4f}",
                     f"{abs(self.diversity - self.gt_diversity):.4f}",
                     f"{abs(self.variation - self.gt_variation):.4f}"]
        widths = [max(len(h), len(g), len(m)) for h, g, m in zip(headers, gt_row, model_row)]
        lines = []
        for row in (headers, gt_row, model_row):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(lines)


def evaluate_corpus(gen_listeners: list[MotionSequence],
                    gt_listeners: list[MotionSequence],
                    speakers: list[MotionSequence],
                    config: dict | None = None) -> MetricReport:
    """Full metric suite for aligned generated/reference corpora."""
    if not (len(gen_listeners) == len(gt_listeners) == len(speakers)):
        raise InvalidInput("generated, reference and speaker lists must be aligned")
    return MetricReport(
        l2=l2_metric(gen_listeners, gt_listeners),
        fd=frechet_distance(pooled_cloud(gen_listeners), pooled_cloud(gt_listeners)),
        pfd=paired_fd(list(zip(speakers, gen_listeners)), list(zip(speakers, gt_listeners))),
        diversity=diversity(gen_listeners) if len(gen_listeners) > 1 else 0.0,
        variation=variation(gen_listeners),
        gt_diversity=diversity(gt_listeners) if len(gt_listeners) > 1 else 0.0,
        gt_variation=variation(gt_listeners),
        num_sequences=len(gen_listeners),
        config=config or {},
    )
