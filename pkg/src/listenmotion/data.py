"""Synthetic dyadic speaker/listener data with known conditional structure.

The listener is a lagged linear response to the speaker plus an identity bias
and Gaussian noise, so lagged linear regression gives an analytic reference
for how predictable the listener is. The waveform's amplitude envelope tracks
the speaker's expression energy and the text tokens encode the topic, so the
audio and text modalities carry measurable signal.

Dataset container: magic "DLDS", u32 version, u32 manifest length, JSON
manifest (count, shapes, config echo, per-record byte offsets), then one
little-endian float32 payload per record followed by its CRC32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInput
from .motion import ROTATION_DIMS, MotionSequence

DATASET_MAGIC = b"DLDS"
DATASET_VERSION = 1

_AR_COEFF = 0.97
_CARRIER_HZ = 220.0


@dataclass
class DyadConfig:
    """Generator knobs for one dyadic corpus."""

    num_frames: int = 240
    fps: int = 30
    expr_dim: int = 50
    lag: int = 12
    coupling: float | list = 1.0        # scalar gain or full feat_dim x feat_dim matrix
    noise_std: float = 0.05
    identity_bias: float | list = 0.1   # scalar broadcast or per-dimension vector
    topic_count: int = 2
    seed: int = 0
    sample_rate: int = 16000
    amplitude_low: float = 0.5          # per-topic sinusoid scale endpoints
    amplitude_high: float = 1.5
    ceiling: float = 3.0                # hard bound on |coefficient|
    rotation_scale: float = 0.25        # shrinks rotation channels to stay in [-pi, pi]

    def __post_init__(self):
        if self.num_frames <= 0 or self.fps <= 0:
            raise InvalidInput("num_frames and fps must be positive")
        if not (0 <= self.lag < self.num_frames):
            raise InvalidInput(f"lag must satisfy 0 <= lag < num_frames, got {self.lag}")
        if self.noise_std < 0:
            raise InvalidInput("noise_std must be non-negative")
        if self.topic_count < 1:
            raise InvalidInput("topic_count must be >= 1")

    @property
    def feat_dim(self) -> int:
        return self.expr_dim + ROTATION_DIMS

    @property
    def wave_len(self) -> int:
        return int(round(self.num_frames / self.fps * self.sample_rate))

    def coupling_matrix(self) -> np.ndarray:
        if np.isscalar(self.coupling):
            return float(self.coupling) * np.eye(self.feat_dim)
        mat = np.asarray(self.coupling, dtype=np.float64)
        if mat.shape != (self.feat_dim, self.feat_dim):
            raise InvalidInput(f"coupling matrix must be {self.feat_dim}x{self.feat_dim}")
        return mat

    def bias_vector(self) -> np.ndarray:
        if np.isscalar(self.identity_bias):
            return np.full(self.feat_dim, float(self.identity_bias))
        vec = np.asarray(self.identity_bias, dtype=np.float64)
        if vec.shape != (self.feat_dim,):
            raise InvalidInput(f"identity_bias vector must have length {self.feat_dim}")
        return vec

    def to_dict(self) -> dict:
        d = {
            "num_frames": self.num_frames, "fps": self.fps, "expr_dim": self.expr_dim,
            "lag": self.lag, "noise_std": self.noise_std, "topic_count": self.topic_count,
            "seed": self.seed, "sample_rate": self.sample_rate,
            "amplitude_low": self.amplitude_low, "amplitude_high": self.amplitude_high,
            "ceiling": self.ceiling, "rotation_scale": self.rotation_scale,
        }
        d["coupling"] = self.coupling if np.isscalar(self.coupling) else np.asarray(self.coupling).tolist()
        d["identity_bias"] = (self.identity_bias if np.isscalar(self.identity_bias)
                              else np.asarray(self.identity_bias).tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DyadConfig":
        return cls(**d)


@dataclass
class DyadSample:
    """One paired clip: speaker and listener motion, speaker audio and text."""

    speaker: MotionSequence
    listener: MotionSequence
    waveform: np.ndarray
    sample_rate: int
    text_tokens: list[int]
    topic_id: int

    def __post_init__(self):
        if len(self.speaker) != len(self.listener) or self.speaker.fps != self.listener.fps:
            raise InvalidInput("speaker and listener must share frame count and fps")
        object.__setattr__(self, "waveform", np.asarray(self.waveform, dtype=np.float32))


def topic_text_tokens(topic_id: int) -> list[int]:
    """Deterministic token template keyed by topic."""
    return [1, 100 + topic_id, 200 + 2 * topic_id, 100 + topic_id, 2]


def _topic_amplitude(config: DyadConfig, topic_id: int) -> float:
    if config.topic_count == 1:
        return 0.5 * (config.amplitude_low + config.amplitude_high)
    frac = topic_id / (config.topic_count - 1)
    return config.amplitude_low + frac * (config.amplitude_high - config.amplitude_low)


def _mixing_matrix(config: DyadConfig) -> np.ndarray:
    """Corpus-wide factor-to-coefficient basis, fixed by the config seed.

    A shared basis mirrors real 3DMM data, where all clips share one
    principal-component structure.
    """
    rng = np.random.default_rng(config.seed ^ 0x5EED5EED)
    mixing = rng.uniform(0.2, 0.5, size=(3, config.feat_dim)) * rng.choice(
        [-1.0, 1.0], size=(3, config.feat_dim))
    mixing[:, config.expr_dim:] *= config.rotation_scale
    return mixing


def _speaker_trajectory(config: DyadConfig, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Three sinusoid-plus-walk factors mixed through the corpus basis.

    Every dimension is a sum of 3 random-phase sinusoids plus an AR(1) noise
    walk; the shared rank-3 basis keeps cross-dimension structure low-rank,
    like expression coefficients of real faces.
    """
    t = np.arange(config.num_frames, dtype=np.float64) / config.fps
    freqs = rng.uniform(0.05, 0.5, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    factors = np.sin(2.0 * np.pi * freqs * t[:, None] + phases)
    eps = rng.normal(0.0, 0.03, size=(config.num_frames, 3))
    walk = np.zeros_like(eps)
    for i in range(1, config.num_frames):
        walk[i] = _AR_COEFF * walk[i - 1] + eps[i]
    factors = amplitude * (factors + walk)
    frames = factors @ _mixing_matrix(config)
    return np.clip(frames, -config.ceiling, config.ceiling)


def _listener_response(config: DyadConfig, rng: np.random.Generator, speaker: np.ndarray) -> np.ndarray:
    coupling = config.coupling_matrix()
    bias = config.bias_vector()
    out = np.tile(bias, (config.num_frames, 1))
    if config.lag < config.num_frames:
        shifted = speaker[: config.num_frames - config.lag]
        out[config.lag:] = shifted @ coupling.T + bias
        if config.noise_std > 0:
            out[config.lag:] += rng.normal(0.0, config.noise_std, size=out[config.lag:].shape)
    return np.clip(out, -config.ceiling, config.ceiling)


def _speaker_waveform(config: DyadConfig, speaker: np.ndarray) -> np.ndarray:
    energy = np.linalg.norm(speaker[:, : config.expr_dim], axis=1)
    env = energy / (energy.max() + 1e-12)
    n = np.arange(config.wave_len, dtype=np.float64)
    frame_pos = n * config.fps / config.sample_rate
    env_per_sample = np.interp(frame_pos, np.arange(config.num_frames, dtype=np.float64), env)
    wave = env_per_sample * np.sin(2.0 * np.pi * _CARRIER_HZ * n / config.sample_rate)
    return wave.astype(np.float32)


def generate_dyad(config: DyadConfig, rng: np.random.Generator) -> DyadSample:
    """Draw one coupled speaker/listener clip from the generator."""
    topic_id = int(rng.integers(config.topic_count))
    amplitude = _topic_amplitude(config, topic_id)
    speaker = _speaker_trajectory(config, rng, amplitude)
    listener = _listener_response(config, rng, speaker)
    return DyadSample(
        speaker=MotionSequence(frames=speaker, fps=config.fps),
        listener=MotionSequence(frames=listener, fps=config.fps),
        waveform=_speaker_waveform(config, speaker),
        sample_rate=config.sample_rate,
        text_tokens=topic_text_tokens(topic_id),
        topic_id=topic_id,
    )


def generate_corpus(config: DyadConfig, count: int, seed: int | None = None) -> list[DyadSample]:
    """Generate `count` samples; sample i uses seed base_seed + i."""
    base = config.seed if seed is None else seed
    return [generate_dyad(config, np.random.default_rng(base + i)) for i in range(count)]


def sliding_window(stream: DyadSample, window: int, stride: int) -> list[DyadSample]:
    """Cut a long clip into overlapping fixed-length windows."""
    if stride < 1:
        raise InvalidInput("stride must be >= 1")
    total = len(stream.speaker)
    if total < window:
        raise InvalidInput(f"stream of {total} frames is shorter than one {window}-frame window")
    wave_len = stream.waveform.shape[0]
    out = []
    for start in range(0, total - window + 1, stride):
        end = start + window
        ws = int(round(start * wave_len / total))
        we = int(round(end * wave_len / total))
        out.append(DyadSample(
            speaker=MotionSequence(frames=stream.speaker.frames[start:end], fps=stream.speaker.fps),
            listener=MotionSequence(frames=stream.listener.frames[start:end], fps=stream.listener.fps),
            waveform=stream.waveform[ws:we],
            sample_rate=stream.sample_rate,
            text_tokens=list(stream.text_tokens),
            topic_id=stream.topic_id,
        ))
    return out


def write_dataset(samples: list[DyadSample], path, config_echo: dict | None = None) -> None:
    if samples:
        frames = len(samples[0].speaker)
        feat_dim = samples[0].speaker.feat_dim
        wave_len = samples[0].waveform.shape[0]
        fps = samples[0].speaker.fps
        rate = samples[0].sample_rate
        for s in samples:
            if (len(s.speaker), s.speaker.feat_dim, s.waveform.shape[0]) != (frames, feat_dim, wave_len):
                raise InvalidInput("all samples in a dataset must share shapes")
        shapes = {"frames": frames, "feat_dim": feat_dim, "wave_len": wave_len,
                  "fps": fps, "sample_rate": rate}
    else:
        shapes = None

    payloads = []
    for s in samples:
        raw = (np.ascontiguousarray(s.speaker.frames, dtype="<f4").tobytes()
               + np.ascontiguousarray(s.listener.frames, dtype="<f4").tobytes()
               + np.ascontiguousarray(s.waveform, dtype="<f4").tobytes())
        payloads.append(raw)

    records = []
    # offsets are absolute; manifest length is needed first, and offsets shift
    # the manifest text, so reserve digits by computing with placeholder offsets
    def manifest_bytes(offsets):
        recs = [{"offset": off, "nbytes": len(raw), "topic_id": s.topic_id,
                 "text_tokens": list(s.text_tokens)}
                for off, raw, s in zip(offsets, payloads, samples)]
        manifest = {"count": len(samples), "shapes": shapes, "config": config_echo, "records": recs}
        return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    offsets = [0] * len(samples)
    for _ in range(4):  # fixed point: offset digits can grow the manifest
        blob = manifest_bytes(offsets)
        base = 4 + 4 + 4 + len(blob)
        new_offsets = []
        pos = base
        for raw in payloads:
            new_offsets.append(pos)
            pos += len(raw) + 4  # payload + crc32
        if new_offsets == offsets:
            break
        offsets = new_offsets
    blob = manifest_bytes(offsets)

    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)
            fh.write(struct.pack("<I", zlib.crc32(raw)))


def read_dataset(path) -> tuple[list[DyadSample], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated dataset file", offset=len(blob))
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    (version,) = struct.unpack("<I", blob[4:8])
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}", offset=4)
    (mlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + mlen:
        raise FormatError(f"{path}: truncated manifest", offset=len(blob))
    manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))

    samples = []
    shapes = manifest["shapes"]
    for i, rec in enumerate(manifest["records"]):
        start, nbytes = rec["offset"], rec["nbytes"]
        end = start + nbytes
        if end + 4 > len(blob):
            raise FormatError(f"{path}: record {i} truncated", offset=len(blob))
        raw = blob[start:end]
        (crc,) = struct.unpack("<I", blob[end:end + 4])
        if zlib.crc32(raw) != crc:
            raise FormatError(f"{path}: CRC mismatch in record {i}", offset=start)
        t, d, w = shapes["frames"], shapes["feat_dim"], shapes["wave_len"]
        motion_bytes = t * d * 4
        speaker = np.frombuffer(raw[:motion_bytes], dtype="<f4").reshape(t, d)
        listener = np.frombuffer(raw[motion_bytes:2 * motion_bytes], dtype="<f4").reshape(t, d)
        wave = np.frombuffer(raw[2 * motion_bytes:2 * motion_bytes + w * 4], dtype="<f4")
        samples.append(DyadSample(
            speaker=MotionSequence(frames=speaker.copy(), fps=shapes["fps"]),
            listener=MotionSequence(frames=listener.copy(), fps=shapes["fps"]),
            waveform=wave.copy(),
            sample_rate=shapes["sample_rate"],
            text_tokens=list(rec["text_tokens"]),
            topic_id=rec["topic_id"],
        ))
    return samples, manifest
