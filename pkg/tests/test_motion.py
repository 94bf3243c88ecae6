import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from listenmotion.errors import InvalidInput
from listenmotion.motion import (MotionFrame, MotionSequence, NormStats, STD_FLOOR,
                                 compute_differential, denormalize, fit_norm_stats,
                                 normalize, smooth_l1, wrap_angles)


def seq(frames, fps=30):
    return MotionSequence(frames=np.asarray(frames, dtype=np.float32), fps=fps)


class TestDifferential:
    def test_constant_sequence_gives_zero_deltas(self):
        out = compute_differential(seq(np.tile([1.5, -2.0, 0.25], (7, 1))))
        assert np.array_equal(out.deltas, np.zeros((7, 3), dtype=np.float32))

    def test_linear_ramp(self):
        v = np.array([0.5, -1.0], dtype=np.float32)
        frames = np.arange(6, dtype=np.float32)[:, None] * v
        out = compute_differential(seq(frames))
        assert np.allclose(out.deltas[0], 0.0)
        assert np.allclose(out.deltas[1:], np.tile(v, (5, 1)))

    def test_matches_row_by_row_loop(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(5, 4)).astype(np.float32)
        out = compute_differential(seq(frames))
        expected = np.zeros_like(frames)
        for i in range(1, 5):
            for j in range(4):
                expected[i, j] = frames[i, j] - frames[i - 1, j]
        assert np.array_equal(out.deltas, expected)

    def test_empty_sequence_rejected(self):
        with pytest.raises(InvalidInput):
            seq(np.zeros((0, 3)))

    @given(st.integers(min_value=1, max_value=20), st.integers(min_value=0, max_value=2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, t, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(t, 3))
        y = rng.normal(size=(t, 3))
        a, b = 0.5, -1.25
        lhs = compute_differential(seq(a * x + b * y)).deltas
        rhs = (a * compute_differential(seq(x)).deltas.astype(np.float64)
               + b * compute_differential(seq(y)).deltas.astype(np.float64))
        assert np.allclose(lhs, rhs, atol=1e-5)

    @given(st.integers(min_value=1, max_value=30), st.integers(min_value=0, max_value=2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_cumsum_inverts(self, t, seed):
        rng = np.random.default_rng(seed)
        frames = rng.normal(size=(t, 2)).astype(np.float32)
        deltas = compute_differential(seq(frames)).deltas
        rebuilt = frames[0] + np.cumsum(deltas, axis=0) - deltas[0]
        assert np.allclose(rebuilt, frames, atol=1e-5)


class TestSmoothL1:
    def test_zero_residual(self):
        x = np.arange(12.0).reshape(3, 4)
        assert smooth_l1(x, x) == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1(np.array([0.5]), np.array([0.0])) == pytest.approx(0.125)

    def test_linear_branch(self):
        assert smooth_l1(np.array([2.0]), np.array([0.0])) == pytest.approx(1.5)

    def test_continuous_at_knee(self):
        lo = smooth_l1(np.array([1.0 - 1e-9]), np.array([0.0]))
        hi = smooth_l1(np.array([1.0 + 1e-9]), np.array([0.0]))
        assert lo == pytest.approx(0.5, abs=1e-6)
        assert hi == pytest.approx(0.5, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInput):
            smooth_l1(np.zeros(3), np.zeros(4))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_sign_symmetric_and_nonnegative(self, vals):
        x = np.asarray(vals)
        z = np.zeros_like(x)
        assert smooth_l1(x, z) == pytest.approx(smooth_l1(-x, z))
        assert smooth_l1(x, z) >= 0.0


class TestNormalization:
    def test_round_trip(self):
        rng = np.random.default_rng(1)
        s = seq(rng.normal(0.3, 2.0, size=(50, 6)))
        stats = fit_norm_stats([s])
        back = denormalize(normalize(s, stats), stats)
        assert np.allclose(back.frames, s.frames, atol=1e-6)

    def test_constant_dimension_clamped(self):
        frames = np.zeros((10, 3), dtype=np.float32)
        frames[:, 0] = 4.0
        stats = fit_norm_stats([seq(frames)])
        assert stats.std[0] == STD_FLOOR
        normed = normalize(seq(frames), stats)
        assert np.allclose(normed.frames[:, 0], 0.0)

    def test_two_sequence_stats_match_hand_computation(self):
        a = seq([[1.0, 2.0], [3.0, 4.0]])
        b = seq([[5.0, 6.0], [7.0, 8.0]])
        stats = fit_norm_stats([a, b])
        stacked = np.array([[1, 2], [3, 4], [5, 6], [7, 8]], dtype=np.float64)
        assert np.allclose(stats.mean, stacked.mean(axis=0))
        assert np.allclose(stats.std, stacked.std(axis=0))

    def test_normalized_corpus_is_standardized(self):
        rng = np.random.default_rng(2)
        seqs = [seq(rng.normal(1.0, 3.0, size=(40, 4))) for _ in range(5)]
        stats = fit_norm_stats(seqs)
        stacked = np.concatenate([normalize(s, stats).frames for s in seqs]).astype(np.float64)
        assert np.max(np.abs(stacked.mean(axis=0))) < 1e-6
        assert np.max(np.abs(stacked.std(axis=0) - 1.0)) < 1e-4

    def test_empty_dataset_rejected(self):
        with pytest.raises(InvalidInput):
            fit_norm_stats([])


class TestFrames:
    def test_rotation_canonicalized(self):
        frame = MotionFrame(expression=np.zeros(4), rotation=np.array([3.5, -3.5, 0.0]))
        assert np.all(frame.rotation >= -np.pi) and np.all(frame.rotation <= np.pi)

    def test_wrap_angles_range(self):
        x = np.linspace(-10, 10, 101)
        w = wrap_angles(x)
        assert np.all(w >= -np.pi) and np.all(w <= np.pi)
        assert np.allclose(np.cos(w), np.cos(x), atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInput):
            seq([[np.nan, 0.0]])
