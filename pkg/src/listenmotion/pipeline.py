"""End-to-end lifecycle: feature preparation, joint denoiser+fusion training,
listener generation, evaluation, and checkpoint inspection.

The speaker's motion is generation input, the listener's motion is the
generation target: listener sequences become codebook tokens through the
frozen VQ-VAE, and the denoiser learns to recover those tokens conditioned
on the fused speaker representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion as diff
from .conditioning import (FusedCondition, FusionConfig, FusionNetwork, MfccConfig,
                           TextEmbedConfig, align_modalities, embed_text, mfcc)
from .config import RunConfig
from .container import read_tensor_container, write_tensor_container
from .data import DyadSample
from .denoiser import DenoiserConfig, TokenDenoiser
from .errors import InvalidConfig, InvalidInput, TrainingError
from .metrics import MetricReport, evaluate_corpus
from .motion import MotionSequence, NormStats, compute_differential, denormalize, fit_norm_stats, normalize
from .quantizer import CHECKPOINT_MAGIC, VqvaeCheckpoint, encode_to_tokens


@dataclass
class SpeakerFeatures:
    """Per-clip fusion inputs, already normalized and frame-aligned."""

    motion: np.ndarray          # (T, d_f)
    audio: np.ndarray           # (T, n_mfcc)
    delta: np.ndarray           # (T, d_f)
    text: np.ndarray | None     # (d_text,)


def _audio_frames(sample: DyadSample, mfcc_cfg: MfccConfig) -> np.ndarray:
    feats = mfcc(sample.waveform, mfcc_cfg)
    _, aligned = align_modalities(sample.speaker, feats)
    return aligned


def fit_speaker_stats(samples: list[DyadSample], mfcc_cfg: MfccConfig
                      ) -> tuple[NormStats, NormStats]:
    """Z-score statistics for speaker motion and aligned audio features."""
    motion_stats = fit_norm_stats([s.speaker for s in samples])
    audio = np.concatenate([_audio_frames(s, mfcc_cfg) for s in samples], axis=0)
    audio64 = audio.astype(np.float64)
    return motion_stats, NormStats(mean=audio64.mean(axis=0), std=audio64.std(axis=0))


def prepare_speaker_features(sample: DyadSample, mfcc_cfg: MfccConfig,
                             text_cfg: TextEmbedConfig, motion_stats: NormStats,
                             audio_stats: NormStats, use_text: bool) -> SpeakerFeatures:
    motion_norm = normalize(sample.speaker, motion_stats)
    delta = compute_differential(motion_norm).deltas
    audio = _audio_frames(sample, mfcc_cfg).astype(np.float64)
    audio = ((audio - audio_stats.mean) / audio_stats.std).astype(np.float32)
    text_vec = None
    if use_text:
        text_vec = embed_text(sample.text_tokens, text_cfg).vector
    return SpeakerFeatures(motion=motion_norm.frames, audio=audio, delta=delta, text=text_vec)


@dataclass
class DiffusionCheckpoint:
    """Denoiser + fusion weights with everything needed to sample exactly."""

    denoiser_config: DenoiserConfig
    fusion_config: FusionConfig
    schedule_config: "diff.ScheduleConfig"
    mfcc_config: MfccConfig
    text_config: TextEmbedConfig
    use_condition: bool
    aux_weight: float
    codebook_size: int
    downsample: int
    motion_stats: NormStats
    audio_stats: NormStats
    denoiser_state: dict[str, np.ndarray]
    fusion_state: dict[str, np.ndarray]
    epochs_trained: int
    config_hash: str = ""

    def build_models(self) -> tuple[TokenDenoiser, FusionNetwork | None]:
        denoiser = TokenDenoiser(self.denoiser_config)
        denoiser.load_state_dict({k: torch.as_tensor(v.copy())
                                  for k, v in self.denoiser_state.items()})
        denoiser.eval()
        fusion = None
        if self.use_condition:
            fusion = FusionNetwork(self.fusion_config)
            fusion.load_state_dict({k: torch.as_tensor(v.copy())
                                    for k, v in self.fusion_state.items()})
            fusion.eval()
        return denoiser, fusion

    def schedule(self) -> diff.DiffusionSchedule:
        return diff.build_schedule(self.schedule_config.num_steps, self.codebook_size,
                                   self.schedule_config)

    def save(self, path) -> None:
        meta = {
            "kind": "diffusion",
            "denoiser_config": self.denoiser_config.to_dict(),
            "fusion_config": self.fusion_config.to_dict(),
            "schedule_config": self.schedule_config.to_dict(),
            "mfcc_config": self.mfcc_config.to_dict(),
            "text_config": self.text_config.to_dict(),
            "use_condition": self.use_condition,
            "aux_weight": self.aux_weight,
            "codebook_size": self.codebook_size,
            "downsample": self.downsample,
            "epochs_trained": self.epochs_trained,
            "config_hash": self.config_hash,
        }
        tensors = {
            "motion.mean": self.motion_stats.mean.astype(np.float32),
            "motion.std": self.motion_stats.std.astype(np.float32),
            "audio.mean": self.audio_stats.mean.astype(np.float32),
            "audio.std": self.audio_stats.std.astype(np.float32),
        }
        tensors.update({f"denoiser.{k}": v for k, v in sorted(self.denoiser_state.items())})
        tensors.update({f"fusion.{k}": v for k, v in sorted(self.fusion_state.items())})
        write_tensor_container(path, CHECKPOINT_MAGIC, meta, tensors)

    @classmethod
    def load(cls, path) -> "DiffusionCheckpoint":
        meta, tensors = read_tensor_container(path, CHECKPOINT_MAGIC)
        if meta.get("kind") != "diffusion":
            raise InvalidInput(f"{path} is not a diffusion checkpoint "
                               f"(kind={meta.get('kind')!r})")
        return cls(
            denoiser_config=DenoiserConfig.from_dict(meta["denoiser_config"]),
            fusion_config=FusionConfig.from_dict(meta["fusion_config"]),
            schedule_config=diff.ScheduleConfig.from_dict(meta["schedule_config"]),
            mfcc_config=MfccConfig.from_dict(meta["mfcc_config"]),
            text_config=TextEmbedConfig.from_dict(meta["text_config"]),
            use_condition=meta["use_condition"],
            aux_weight=meta["aux_weight"],
            codebook_size=meta["codebook_size"],
            downsample=meta["downsample"],
            motion_stats=NormStats(mean=tensors["motion.mean"], std=tensors["motion.std"]),
            audio_stats=NormStats(mean=tensors["audio.mean"], std=tensors["audio.std"]),
            denoiser_state={k[len("denoiser."):]: v for k, v in tensors.items()
                            if k.startswith("denoiser.")},
            fusion_state={k[len("fusion."):]: v for k, v in tensors.items()
                          if k.startswith("fusion.")},
            epochs_trained=meta["epochs_trained"],
            config_hash=meta.get("config_hash", ""),
        )


def check_checkpoint_compatibility(vq: VqvaeCheckpoint, dc: DiffusionCheckpoint) -> None:
    """Raise naming the first field on which the two checkpoints disagree."""
    if vq.config.codebook_size != dc.codebook_size:
        raise InvalidConfig(f"checkpoint mismatch on codebook_size: "
                            f"vqvae={vq.config.codebook_size}, diffusion={dc.codebook_size}")
    if vq.config.downsample != dc.downsample:
        raise InvalidConfig(f"checkpoint mismatch on downsample: "
                            f"vqvae={vq.config.downsample}, diffusion={dc.downsample}")
    if dc.use_condition and dc.denoiser_config.cond_dim != dc.fusion_config.cond_dim:
        raise InvalidConfig(f"checkpoint mismatch on cond_dim: "
                            f"denoiser={dc.denoiser_config.cond_dim}, "
                            f"fusion={dc.fusion_config.cond_dim}")


def _batch_condition(fusion: FusionNetwork | None, feats: list[SpeakerFeatures],
                     use_text: bool) -> torch.Tensor | None:
    if fusion is None:
        return None
    motion = torch.as_tensor(np.stack([f.motion for f in feats]))
    audio = torch.as_tensor(np.stack([f.audio for f in feats]))
    delta = torch.as_tensor(np.stack([f.delta for f in feats]))
    text = None
    if use_text:
        text = torch.as_tensor(np.stack([f.text for f in feats]))
    return fusion(motion, audio, delta, text)


def train_diffusion(samples: list[DyadSample], vq_ckpt: VqvaeCheckpoint,
                    run_cfg: RunConfig, seed: int | None = None,
                    resume: DiffusionCheckpoint | None = None
                    ) -> tuple[DiffusionCheckpoint, list[dict]]:
    """Jointly train the denoiser and fusion network on tokenized listeners."""
    if not samples:
        raise TrainingError("training dataset is empty")
    cfg = run_cfg.normalized()
    seed = cfg.seed if seed is None else seed
    tcfg = cfg.train

    vq_model = vq_ckpt.build_model()
    sched = diff.build_schedule(cfg.schedule.num_steps, cfg.vqvae.codebook_size, cfg.schedule)

    if resume is not None:
        motion_stats, audio_stats = resume.motion_stats, resume.audio_stats
    else:
        motion_stats, audio_stats = fit_speaker_stats(samples, cfg.mfcc)
    feats = [prepare_speaker_features(s, cfg.mfcc, cfg.text, motion_stats, audio_stats,
                                      cfg.fusion.use_text) for s in samples]
    tokens = np.stack([
        encode_to_tokens(normalize(s.listener, vq_ckpt.norm_stats), vq_model)
        for s in samples])
    n_positions = tokens.shape[1]
    if n_positions != cfg.denoiser.num_positions:
        raise InvalidConfig(f"token length {n_positions} does not match configured "
                            f"num_positions {cfg.denoiser.num_positions}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_val = int(round(tcfg.val_fraction * len(samples))) if len(samples) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    torch.manual_seed(seed)
    denoiser = TokenDenoiser(cfg.denoiser)
    fusion = FusionNetwork(cfg.fusion) if cfg.use_condition else None
    if resume is not None:
        denoiser.load_state_dict({k: torch.as_tensor(v.copy())
                                  for k, v in resume.denoiser_state.items()})
        if fusion is not None:
            fusion.load_state_dict({k: torch.as_tensor(v.copy())
                                    for k, v in resume.fusion_state.items()})
    params = list(denoiser.parameters())
    if fusion is not None:
        params += list(fusion.parameters())
    opt = torch.optim.Adam(params, lr=tcfg.lr)
    start_epoch = resume.epochs_trained if resume is not None else 0

    def eval_split(idx: np.ndarray, eval_rng: np.random.Generator) -> float:
        denoiser.eval()
        if fusion is not None:
            fusion.eval()
        total = 0.0
        with torch.no_grad():
            for i in range(0, len(idx), tcfg.batch_size):
                batch = idx[i:i + tcfg.batch_size]
                t = eval_rng.integers(1, sched.num_steps + 1, size=len(batch))
                x0 = tokens[batch]
                x_t = np.stack([diff.q_sample(x0[j], int(t[j]), sched, eval_rng)
                                for j in range(len(batch))])
                cond = _batch_condition(fusion, [feats[k] for k in batch], cfg.fusion.use_text)
                kl, nll = diff.loss_terms_torch(
                    denoiser, torch.as_tensor(x0), torch.as_tensor(x_t), t, cond, sched)
                total += float(kl + tcfg.aux_weight * nll) * len(batch)
        return total / max(len(idx), 1)

    history: list[dict] = []
    best_val = float("inf")
    stale = 0
    epochs_done = start_epoch
    for epoch in range(start_epoch, start_epoch + tcfg.max_epochs):
        denoiser.train()
        if fusion is not None:
            fusion.train()
        sums = np.zeros(3)
        n_batches = 0
        perm = rng.permutation(len(train_idx))
        for i in range(0, len(perm), tcfg.batch_size):
            batch = train_idx[perm[i:i + tcfg.batch_size]]
            t = rng.integers(1, sched.num_steps + 1, size=len(batch))
            x0 = tokens[batch]
            x_t = np.stack([diff.q_sample(x0[j], int(t[j]), sched, rng)
                            for j in range(len(batch))])
            cond = _batch_condition(fusion, [feats[k] for k in batch], cfg.fusion.use_text)
            kl, nll = diff.loss_terms_torch(
                denoiser, torch.as_tensor(x0), torch.as_tensor(x_t), t, cond, sched)
            loss = kl + tcfg.aux_weight * nll
            if not torch.isfinite(loss):
                raise TrainingError(f"diffusion loss became non-finite at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            if tcfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip)
            opt.step()
            sums += np.array([float(loss), float(kl), float(nll)])
            n_batches += 1
        train_avg = sums / max(n_batches, 1)
        if len(val_idx):
            val_total = eval_split(val_idx, np.random.default_rng(seed + 7919))
        else:
            val_total = train_avg[0]
        history.append({"epoch": epoch + 1, "train_total": train_avg[0],
                        "train_step_kl": train_avg[1], "train_x0_nll": train_avg[2],
                        "val_total": val_total})
        epochs_done = epoch + 1
        if epoch + 1 < start_epoch + tcfg.min_epochs:
            continue
        if val_total < best_val:
            best_val = val_total
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break

    ckpt = DiffusionCheckpoint(
        denoiser_config=cfg.denoiser, fusion_config=cfg.fusion,
        schedule_config=cfg.schedule, mfcc_config=cfg.mfcc, text_config=cfg.text,
        use_condition=cfg.use_condition, aux_weight=tcfg.aux_weight,
        codebook_size=cfg.vqvae.codebook_size, downsample=cfg.vqvae.downsample,
        motion_stats=motion_stats, audio_stats=audio_stats,
        denoiser_state={k: v.detach().numpy().astype(np.float32).copy()
                        for k, v in denoiser.state_dict().items()},
        fusion_state=({k: v.detach().numpy().astype(np.float32).copy()
                       for k, v in fusion.state_dict().items()} if fusion is not None else {}),
        epochs_trained=epochs_done, config_hash=run_cfg.config_hash())
    return ckpt, history


def generate_listener(sample: DyadSample, vq_ckpt: VqvaeCheckpoint,
                      diff_ckpt: DiffusionCheckpoint,
                      rng: np.random.Generator) -> MotionSequence:
    """Sample one listener response for a speaker clip and decode it to frames."""
    check_checkpoint_compatibility(vq_ckpt, diff_ckpt)
    denoiser, fusion = diff_ckpt.build_models()
    sched = diff_ckpt.schedule()
    cond = None
    if fusion is not None:
        f = prepare_speaker_features(sample, diff_ckpt.mfcc_config, diff_ckpt.text_config,
                                     diff_ckpt.motion_stats, diff_ckpt.audio_stats,
                                     diff_ckpt.fusion_config.use_text)
        with torch.no_grad():
            out = fusion(torch.as_tensor(f.motion), torch.as_tensor(f.audio),
                         torch.as_tensor(f.delta),
                         torch.as_tensor(f.text) if f.text is not None else None)
        cond = FusedCondition(vectors=out.numpy())
    tokens = diff.sample(denoiser, cond, sched, rng, diff_ckpt.denoiser_config.num_positions)
    vq_model = vq_ckpt.build_model()
    decoded = vq_model.decode_tokens(tokens, fps=sample.speaker.fps)
    return denormalize(decoded, vq_ckpt.norm_stats)


def evaluate_datasets(generated: list[DyadSample], reference: list[DyadSample],
                      config_echo: dict | None = None) -> MetricReport:
    """Metric suite over aligned corpora; speakers come from the reference."""
    if len(generated) != len(reference):
        raise InvalidInput(f"corpus size mismatch: {len(generated)} generated "
                           f"vs {len(reference)} reference")
    return evaluate_corpus(
        gen_listeners=[s.listener for s in generated],
        gt_listeners=[s.listener for s in reference],
        speakers=[s.speaker for s in reference],
        config=config_echo or {})


def inspect_vqvae(ckpt: VqvaeCheckpoint) -> dict:
    counts = ckpt.state["ema_counts"].astype(np.float64)
    total = counts.sum()
    if total > 0:
        probs = counts / total
        nz = probs[probs > 0]
        perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
    else:
        perplexity = 0.0
    n_params = int(sum(v.size for k, v in ckpt.state.items()
                       if k not in ("ema_counts", "ema_sums", "codes")))
    return {"kind": "vqvae", "codebook_size": ckpt.config.codebook_size,
            "code_dim": ckpt.config.code_dim, "downsample": ckpt.config.downsample,
            "usage_counts": counts.tolist(), "codes_used": int((counts > 0).sum()),
            "perplexity": perplexity, "parameter_count": n_params,
            "epochs_trained": ckpt.epochs_trained, "config_hash": ckpt.config_hash}


def inspect_diffusion(ckpt: DiffusionCheckpoint) -> dict:
    sched = ckpt.schedule()
    n_params = int(sum(v.size for v in ckpt.denoiser_state.values())
                   + sum(v.size for v in ckpt.fusion_state.values()))
    return {"kind": "diffusion", "codebook_size": ckpt.codebook_size,
            "num_steps": sched.num_steps,
            "mask_cum": sched.mask_cum.tolist(),
            "terminal_mask_mass": float(sched.mask_cum[-1]),
            "parameter_count": n_params, "epochs_trained": ckpt.epochs_trained,
            "use_condition": ckpt.use_condition, "config_hash": ckpt.config_hash}
