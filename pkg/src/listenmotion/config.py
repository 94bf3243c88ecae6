"""Run configuration: one JSON document covering every pipeline stage.

`RunConfig.normalized()` resolves the fields that must agree across stages
(feature widths, token counts, codebook sizes) so ablation configs only
need to set the knobs they change.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .conditioning import FusionConfig, MfccConfig, TextEmbedConfig
from .data import DyadConfig
from .denoiser import DenoiserConfig
from .diffusion import ScheduleConfig
from .errors import InvalidConfig
from .quantizer import VqvaeConfig


@dataclass
class DiffusionTrainConfig:
    lr: float = 1e-4
    grad_clip: float = 1.0
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.1
    aux_weight: float = 1e-3
    min_epochs: int = 0   # early-stopping burn-in

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "lr", "grad_clip", "batch_size", "max_epochs", "patience",
            "val_fraction", "aux_weight", "min_epochs")}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionTrainConfig":
        return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus_count: int = 64
    stream_frames: int | None = None   # when set, synth cuts sliding windows from long streams
    window_stride: int = 80
    use_condition: bool = True
    samples_per_input: int = 1
    data: DyadConfig = field(default_factory=DyadConfig)
    vqvae: VqvaeConfig = field(default_factory=VqvaeConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    text: TextEmbedConfig = field(default_factory=TextEmbedConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)

    def normalized(self) -> "RunConfig":
        """Copy with cross-stage fields made consistent."""
        cfg = RunConfig.from_dict(self.to_dict())
        cfg.vqvae.expr_dim = cfg.data.expr_dim
        if cfg.data.num_frames % cfg.vqvae.downsample != 0:
            raise InvalidConfig(
                f"num_frames {cfg.data.num_frames} must be divisible by the "
                f"downsample ratio {cfg.vqvae.downsample}")
        cfg.fusion.motion_dim = cfg.data.feat_dim
        cfg.fusion.audio_dim = cfg.mfcc.n_mfcc
        cfg.fusion.text_dim = cfg.text.dim
        cfg.fusion.pool_stride = cfg.vqvae.downsample
        cfg.denoiser.codebook_size = cfg.vqvae.codebook_size
        cfg.denoiser.num_positions = cfg.data.num_frames // cfg.vqvae.downsample
        cfg.denoiser.cond_dim = cfg.fusion.cond_dim if cfg.use_condition else None
        return cfg

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "out_dir": self.out_dir, "corpus_count": self.corpus_count,
            "stream_frames": self.stream_frames, "window_stride": self.window_stride,
            "use_condition": self.use_condition, "samples_per_input": self.samples_per_input,
            "data": self.data.to_dict(), "vqvae": self.vqvae.to_dict(),
            "schedule": self.schedule.to_dict(), "denoiser": self.denoiser.to_dict(),
            "mfcc": self.mfcc.to_dict(), "text": self.text.to_dict(),
            "fusion": self.fusion.to_dict(), "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f: d[f] for f in ("seed", "out_dir", "corpus_count", "stream_frames",
                                   "window_stride", "use_condition", "samples_per_input")
                 if f in d}
        sections = {
            "data": DyadConfig, "vqvae": VqvaeConfig, "schedule": ScheduleConfig,
            "denoiser": DenoiserConfig, "mfcc": MfccConfig, "text": TextEmbedConfig,
            "fusion": FusionConfig, "train": DiffusionTrainConfig,
        }
        for name, klass in sections.items():
            if name in d:
                known[name] = klass.from_dict(d[name])
        unknown = set(d) - set(sections) - {"seed", "out_dir", "corpus_count", "stream_frames",
                                            "window_stride", "use_condition", "samples_per_input"}
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except (TypeError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"bad config JSON: {exc}") from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_json(fh.read())
