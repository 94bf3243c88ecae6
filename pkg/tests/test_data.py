import numpy as np
import pytest

from listenmotion.data import (DyadConfig, DyadSample, generate_corpus, generate_dyad,
                               read_dataset, sliding_window, topic_text_tokens,
                               write_dataset)
from listenmotion.errors import FormatError, InvalidInput
from listenmotion.metrics import paired_fd
from listenmotion.motion import fit_norm_stats


def small_config(**kw):
    base = dict(num_frames=240, expr_dim=5, lag=12, noise_std=0.05, seed=7)
    base.update(kw)
    return DyadConfig(**base)


class TestGenerateDyad:
    def test_degenerate_coupling_is_exact(self):
        cfg = small_config(lag=0, noise_std=0.0, coupling=1.0, identity_bias=0.25)
        sample = generate_dyad(cfg, np.random.default_rng(0))
        expected = sample.speaker.frames.astype(np.float64) + 0.25
        assert np.allclose(sample.listener.frames, np.clip(expected, -cfg.ceiling, cfg.ceiling),
                           atol=1e-6)

    def test_same_seed_bit_identical(self):
        cfg = small_config()
        a = generate_dyad(cfg, np.random.default_rng(99))
        b = generate_dyad(cfg, np.random.default_rng(99))
        assert np.array_equal(a.speaker.frames, b.speaker.frames)
        assert np.array_equal(a.listener.frames, b.listener.frames)
        assert np.array_equal(a.waveform, b.waveform)
        assert a.text_tokens == b.text_tokens

    def test_lag_shows_in_cross_correlation(self):
        cfg = small_config(lag=12, noise_std=0.01, coupling=1.0, identity_bias=0.0)
        sample = generate_dyad(cfg, np.random.default_rng(3))
        s = sample.speaker.frames[:, 0].astype(np.float64)
        l = sample.listener.frames[:, 0].astype(np.float64)
        s -= s.mean()
        l -= l.mean()
        lags = range(0, 30)
        corr = [np.dot(s[: len(s) - k], l[k:]) for k in lags]
        assert abs(int(np.argmax(corr)) - 12) <= 1

    def test_amplitude_bounded(self):
        cfg = small_config(ceiling=2.0)
        for i in range(5):
            sample = generate_dyad(cfg, np.random.default_rng(i))
            assert np.max(np.abs(sample.speaker.frames)) <= 2.0
            assert np.max(np.abs(sample.listener.frames)) <= 2.0

    def test_waveform_duration(self):
        cfg = small_config()
        sample = generate_dyad(cfg, np.random.default_rng(1))
        assert sample.waveform.shape[0] == round(cfg.num_frames / cfg.fps * cfg.sample_rate)

    def test_rotation_channels_within_pi(self):
        cfg = small_config()
        sample = generate_dyad(cfg, np.random.default_rng(2))
        rot = sample.speaker.frames[:, cfg.expr_dim:]
        assert np.all(np.abs(rot) <= np.pi)

    def test_invalid_configs(self):
        with pytest.raises(InvalidInput):
            small_config(lag=240)
        with pytest.raises(InvalidInput):
            small_config(noise_std=-1.0)

    def test_text_template_deterministic(self):
        assert topic_text_tokens(3) == topic_text_tokens(3)
        assert topic_text_tokens(0) != topic_text_tokens(1)


class TestCorpus:
    def test_seed_stable_stats(self):
        cfg = small_config()
        a = generate_corpus(cfg, 6)
        b = generate_corpus(cfg, 6)
        sa = fit_norm_stats([s.listener for s in a])
        sb = fit_norm_stats([s.listener for s in b])
        assert np.array_equal(sa.mean, sb.mean)
        assert np.array_equal(sa.std, sb.std)

    def test_per_sample_seed_derivation(self):
        cfg = small_config(seed=100)
        corpus = generate_corpus(cfg, 3)
        direct = generate_dyad(cfg, np.random.default_rng(102))
        assert np.array_equal(corpus[2].speaker.frames, direct.speaker.frames)

    def test_shuffled_listener_has_higher_paired_fd(self):
        cfg = small_config(noise_std=0.02, coupling=0.9, num_frames=240)
        corpus = generate_corpus(cfg, 10)
        gt = [(s.speaker, s.listener) for s in corpus]
        shuffled = [(corpus[i].speaker, corpus[(i + 1) % 10].listener) for i in range(10)]
        self_dist = paired_fd(gt, gt)
        assert paired_fd(shuffled, gt) > self_dist + 1e-3
        assert self_dist < 1e-6


class TestSlidingWindow:
    def stream(self, frames=480):
        return generate_dyad(small_config(num_frames=frames), np.random.default_rng(5))

    def test_disjoint_windows(self):
        out = sliding_window(self.stream(480), window=240, stride=240)
        assert len(out) == 2

    def test_overlapping_window_count(self):
        out = sliding_window(self.stream(480), window=240, stride=80)
        assert len(out) == (480 - 240) // 80 + 1 == 4

    def test_window_contents_match_slices(self):
        stream = self.stream(480)
        out = sliding_window(stream, window=240, stride=80)
        for i, win in enumerate(out):
            start = i * 80
            assert np.array_equal(win.speaker.frames, stream.speaker.frames[start:start + 240])
            assert np.array_equal(win.listener.frames, stream.listener.frames[start:start + 240])

    def test_short_stream_rejected(self):
        with pytest.raises(InvalidInput):
            sliding_window(self.stream(120), window=240, stride=80)

    def test_bad_stride_rejected(self):
        with pytest.raises(InvalidInput):
            sliding_window(self.stream(480), window=240, stride=0)


class TestDatasetContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        corpus = generate_corpus(small_config(), 10)
        path = tmp_path / "corpus.dlds"
        write_dataset(corpus, path, config_echo={"tag": "unit"})
        back, manifest = read_dataset(path)
        assert manifest["count"] == 10
        assert manifest["config"] == {"tag": "unit"}
        for a, b in zip(corpus, back):
            assert np.array_equal(a.speaker.frames, b.speaker.frames)
            assert np.array_equal(a.listener.frames, b.listener.frames)
            assert np.array_equal(a.waveform, b.waveform)
            assert a.text_tokens == b.text_tokens and a.topic_id == b.topic_id

    def test_rewrite_is_byte_identical(self, tmp_path):
        corpus = generate_corpus(small_config(), 4)
        p1, p2 = tmp_path / "a.dlds", tmp_path / "b.dlds"
        write_dataset(corpus, p1)
        back, _ = read_dataset(p1)
        write_dataset(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupted_payload_detected(self, tmp_path):
        corpus = generate_corpus(small_config(), 3)
        path = tmp_path / "corpus.dlds"
        write_dataset(corpus, path)
        blob = bytearray(path.read_bytes())
        blob[-100] ^= 0xFF  # flip one payload byte in the last record
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_truncation_detected(self, tmp_path):
        corpus = generate_corpus(small_config(), 2)
        path = tmp_path / "corpus.dlds"
        write_dataset(corpus, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(FormatError) as err:
            read_dataset(path)
        assert err.value.offset is not None

    def test_empty_dataset_round_trip(self, tmp_path):
        path = tmp_path / "empty.dlds"
        write_dataset([], path)
        back, manifest = read_dataset(path)
        assert back == [] and manifest["count"] == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dlds"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_mixed_shapes_rejected(self, tmp_path):
        a = generate_dyad(small_config(num_frames=240), np.random.default_rng(0))
        b = generate_dyad(small_config(num_frames=480), np.random.default_rng(1))
        with pytest.raises(InvalidInput):
            write_dataset([a, b], tmp_path / "bad.dlds")
