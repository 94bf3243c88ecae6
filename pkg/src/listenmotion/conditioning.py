"""Speaker-side conditioning: MFCC audio features, text embeddings,
cross-modal attention, and the fusion network producing the conditioning
sequence the denoiser attends to.

The text encoder is not run in-repo: toy mode hashes token ids to fixed
seeded vectors, and ingestion mode reads precomputed embedding records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft
import torch
import torch.nn as nn

from .container import read_tensor_container, write_tensor_container
from .errors import InvalidInput
from .motion import MotionSequence

EMBED_MAGIC = b"LMEB"


@dataclass
class MfccConfig:
    sample_rate: int = 16000
    window: int = 400
    hop: int = 533          # round(sample_rate / fps) at 30 fps, ~1:1 with video frames
    n_mels: int = 40
    n_mfcc: int = 13
    preemphasis: float = 0.97
    log_floor: float = 1e-10

    def to_dict(self) -> dict:
        return {"sample_rate": self.sample_rate, "window": self.window, "hop": self.hop,
                "n_mels": self.n_mels, "n_mfcc": self.n_mfcc,
                "preemphasis": self.preemphasis, "log_floor": self.log_floor}

    @classmethod
    def from_dict(cls, d: dict) -> "MfccConfig":
        return cls(**d)


@dataclass(frozen=True)
class AudioFeatureSequence:
    frames: np.ndarray
    hop: int
    window: int
    sample_rate: int

    def __len__(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale over rfft bin frequencies."""
    bin_freqs = np.arange(n_fft // 2 + 1, dtype=np.float64) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, bin_freqs.shape[0]))
    for m in range(n_mels):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mfcc(waveform, config: MfccConfig) -> AudioFeatureSequence:
    """Pre-emphasis, Hann frames, magnitude spectrum, log-mel, DCT-II."""
    wave = np.asarray(waveform, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise InvalidInput("waveform must be a nonempty 1-D array")
    if config.sample_rate <= 0:
        raise InvalidInput("sample rate must be positive")
    if wave.size < config.window:
        raise InvalidInput(
            f"waveform of {wave.size} samples is shorter than one {config.window}-sample window")
    emph = np.empty_like(wave)
    emph[0] = wave[0]
    emph[1:] = wave[1:] - config.preemphasis * wave[:-1]

    n_frames = (wave.size - config.window) // config.hop + 1
    starts = np.arange(n_frames) * config.hop
    frames = emph[starts[:, None] + np.arange(config.window)]
    frames = frames * np.hanning(config.window)

    mag = np.abs(np.fft.rfft(frames, n=config.window, axis=1))
    fb = mel_filterbank(config.n_mels, config.window, config.sample_rate)
    energies = np.log(np.maximum(mag @ fb.T, config.log_floor))
    coeffs = scipy.fft.dct(energies, type=2, axis=1, norm="ortho")[:, : config.n_mfcc]
    return AudioFeatureSequence(frames=coeffs.astype(np.float32), hop=config.hop,
                                window=config.window, sample_rate=config.sample_rate)


@dataclass
class TextEmbedConfig:
    dim: int = 64
    seed: int = 1234
    table_path: str | None = None   # ingestion mode when set

    def to_dict(self) -> dict:
        return {"dim": self.dim, "seed": self.seed, "table_path": self.table_path}

    @classmethod
    def from_dict(cls, d: dict) -> "TextEmbedConfig":
        return cls(**d)


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    provenance: str  # "toy-hash" | "ingested"


def token_hash_vector(token_id: int, dim: int, seed: int) -> np.ndarray:
    """Fixed pseudo-random vector for one token id."""
    rng = np.random.default_rng((seed << 20) + int(token_id))
    return rng.standard_normal(dim).astype(np.float32)


def write_embedding_table(path, ids: list[int], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise InvalidInput("vectors must be (len(ids), dim)")
    meta = {"dimension": int(vectors.shape[1]), "count": len(ids), "ids": [int(i) for i in ids]}
    write_tensor_container(path, EMBED_MAGIC, meta, {"vectors": vectors})


def read_embedding_table(path) -> tuple[dict[int, np.ndarray], int]:
    meta, tensors = read_tensor_container(path, EMBED_MAGIC)
    vectors = tensors["vectors"]
    if vectors.shape != (meta["count"], meta["dimension"]):
        raise InvalidInput(f"embedding table {path}: payload shape {vectors.shape} "
                           f"does not match header count/dimension")
    return {int(i): vectors[row] for row, i in enumerate(meta["ids"])}, meta["dimension"]


def embed_text(token_ids: list[int], config: TextEmbedConfig) -> TextEmbedding:
    """Mean-pooled token vectors; hashed in toy mode, looked up in ingestion mode."""
    if not token_ids:
        raise InvalidInput("token list must be nonempty")
    if config.table_path is None:
        vecs = [token_hash_vector(t, config.dim, config.seed) for t in token_ids]
        return TextEmbedding(vector=np.mean(vecs, axis=0).astype(np.float32),
                             provenance="toy-hash")
    table, dim = read_embedding_table(config.table_path)
    if dim != config.dim:
        raise InvalidInput(f"embedding table dimension {dim} != configured {config.dim}")
    missing = [t for t in token_ids if t not in table]
    if missing:
        raise InvalidInput(f"embedding table missing token ids {missing}")
    return TextEmbedding(vector=np.mean([table[t] for t in token_ids], axis=0).astype(np.float32),
                         provenance="ingested")


class CrossAttention(nn.Module):
    """Scaled dot-product attention from one sequence onto another."""

    def __init__(self, query_dim: int, kv_dim: int, width: int, heads: int = 1):
        super().__init__()
        if width % heads != 0:
            raise InvalidInput(f"head count {heads} must divide width {width}")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(query_dim, width, bias=False)
        self.k_proj = nn.Linear(kv_dim, width, bias=False)
        self.v_proj = nn.Linear(kv_dim, width, bias=False)
        self.out_proj = nn.Linear(width, width, bias=False)

    def forward(self, query_src: torch.Tensor, kv_src: torch.Tensor) -> torch.Tensor:
        squeeze = query_src.dim() == 2
        if squeeze:
            query_src, kv_src = query_src.unsqueeze(0), kv_src.unsqueeze(0)
        b, tq, _ = query_src.shape
        tk = kv_src.shape[1]
        def split(x):
            return x.view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        q = split(self.q_proj(query_src))
        k = split(self.k_proj(kv_src))
        v = split(self.v_proj(kv_src))
        scores = q @ k.transpose(-2, -1) / (self.head_dim ** 0.5)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, self.width)
        out = self.out_proj(out)
        return out.squeeze(0) if squeeze else out


def cross_attention(query_src, kv_src, module: CrossAttention) -> np.ndarray:
    """Functional wrapper over numpy sequences."""
    with torch.no_grad():
        out = module(torch.as_tensor(np.asarray(query_src), dtype=torch.float32),
                     torch.as_tensor(np.asarray(kv_src), dtype=torch.float32))
    return out.numpy()


def align_modalities(motion: MotionSequence, audio: AudioFeatureSequence
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Resample audio frames along time to the motion frame count."""
    t = len(motion)
    ta = len(audio)
    if t == 0 or ta == 0:
        raise InvalidInput("both modalities must be nonempty")
    if ta == t:
        return motion.frames, audio.frames
    if ta == 1:
        return motion.frames, np.repeat(audio.frames, t, axis=0)
    src = np.linspace(0.0, 1.0, ta)
    dst = np.linspace(0.0, 1.0, t)
    resampled = np.stack([np.interp(dst, src, audio.frames[:, j].astype(np.float64))
                          for j in range(audio.frames.shape[1])], axis=1)
    return motion.frames, resampled.astype(np.float32)


@dataclass
class FusionConfig:
    motion_dim: int = 53
    audio_dim: int = 13
    text_dim: int = 64
    width: int = 512
    cond_dim: int = 512
    pool_stride: int = 8    # conditioning positions align with token positions
    heads: int = 1
    pos_dim: int = 16       # sinusoidal position channels fed to the attentions
    use_text: bool = True
    use_differential: bool = True

    def to_dict(self) -> dict:
        return {"motion_dim": self.motion_dim, "audio_dim": self.audio_dim,
                "text_dim": self.text_dim, "width": self.width, "cond_dim": self.cond_dim,
                "pool_stride": self.pool_stride, "heads": self.heads,
                "pos_dim": self.pos_dim,
                "use_text": self.use_text, "use_differential": self.use_differential}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d)


@dataclass(frozen=True)
class FusedCondition:
    """Conditioning sequence the denoiser cross-attends to."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise InvalidInput("condition vectors must be a finite M-by-d matrix")
        object.__setattr__(self, "vectors", v)


def _position_channels(t: int, dim: int, device) -> torch.Tensor:
    """Sinusoidal per-frame features appended to the attention inputs; without
    them the attentions can only route content, not time."""
    pos = torch.arange(t, dtype=torch.float32, device=device)
    half = dim // 2
    freqs = torch.exp(-math.log(200.0) * torch.arange(half, dtype=torch.float32,
                                                      device=device) / max(half - 1, 1))
    args = pos[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)[:, :dim]


class FusionNetwork(nn.Module):
    """Two cross-modal attention streams, pooled, concatenated with the text
    vector and mixed by a 2-layer MLP.

    Stream 1 queries from audio over motion keys/values; stream 2 queries
    from motion differentials over audio keys/values.
    """

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        p = config.pos_dim
        self.attn_audio_motion = CrossAttention(config.audio_dim + p, config.motion_dim + p,
                                                config.width, config.heads)
        if config.use_differential:
            self.attn_delta_audio = CrossAttention(config.motion_dim + p, config.audio_dim + p,
                                                   config.width, config.heads)
        in_dim = config.width
        if config.use_differential:
            in_dim += config.width
        if config.use_text:
            in_dim += config.text_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, 2 * config.width),
            nn.GELU(),
            nn.Linear(2 * config.width, config.cond_dim),
        )

    def _pool(self, x: torch.Tensor) -> torch.Tensor:
        b, t, w = x.shape
        stride = self.config.pool_stride
        if t % stride != 0:
            raise InvalidInput(f"sequence length {t} not divisible by pool stride {stride}")
        return x.view(b, t // stride, stride, w).mean(dim=2)

    def forward(self, motion: torch.Tensor, audio: torch.Tensor,
                delta: torch.Tensor, text: torch.Tensor | None) -> torch.Tensor:
        squeeze = motion.dim() == 2
        if squeeze:
            motion, audio, delta = motion.unsqueeze(0), audio.unsqueeze(0), delta.unsqueeze(0)
            if text is not None:
                text = text.unsqueeze(0)
        b, t, _ = motion.shape
        pos = _position_channels(t, self.config.pos_dim, motion.device)
        pos = pos[None].expand(b, -1, -1)
        motion_p = torch.cat([motion, pos], dim=-1)
        audio_p = torch.cat([audio, pos], dim=-1)
        parts = [self._pool(self.attn_audio_motion(audio_p, motion_p))]
        if self.config.use_differential:
            delta_p = torch.cat([delta, pos], dim=-1)
            parts.append(self._pool(self.attn_delta_audio(delta_p, audio_p)))
        if self.config.use_text:
            if text is None:
                raise InvalidInput("fusion configured with text but none was given")
            m = parts[0].shape[1]
            parts.append(text.unsqueeze(1).expand(-1, m, -1))
        out = self.mlp(torch.cat(parts, dim=-1))
        return out.squeeze(0) if squeeze else out


def fuse(motion: np.ndarray, audio: np.ndarray, delta: np.ndarray,
         text: TextEmbedding | None, network: FusionNetwork) -> FusedCondition:
    """Run the fusion network on aligned per-frame features."""
    if motion.shape[0] != audio.shape[0] or motion.shape[0] != delta.shape[0]:
        raise InvalidInput("modalities must be aligned to a common frame count")
    text_t = None
    if network.config.use_text:
        if text is None:
            raise InvalidInput("fusion configured with text but none was given")
        text_t = torch.as_tensor(text.vector, dtype=torch.float32)
    with torch.no_grad():
        out = network(torch.as_tensor(motion, dtype=torch.float32),
                      torch.as_tensor(audio, dtype=torch.float32),
                      torch.as_tensor(delta, dtype=torch.float32),
                      text_t)
    return FusedCondition(vectors=out.numpy())
