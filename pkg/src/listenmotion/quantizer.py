"""VQ-VAE over listener motion: temporal conv encoder (downsample by a
power-of-two ratio), codebook nearest-neighbor quantization with
straight-through gradients and EMA codebook updates, mirrored decoder, and
the commitment/reconstruction/velocity losses.

Index `codebook_size` is reserved for the diffusion MASK symbol and never
appears in quantizer output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import read_tensor_container, write_tensor_container
from .errors import InvalidConfig, InvalidInput, TrainingError
from .motion import MotionSequence, NormStats, fit_norm_stats, normalize

CHECKPOINT_MAGIC = b"LMCK"


@dataclass
class VqvaeConfig:
    expr_dim: int = 50
    codebook_size: int = 256
    code_dim: int = 512
    downsample: int = 8
    hidden: int = 512
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    commitment_weight: float = 0.02
    reconstruction_weight: float = 1.0
    velocity_weight: float = 0.05
    lr: float = 1e-4
    grad_clip: float = 1.0
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 5
    val_fraction: float = 0.1
    warmup_epochs: int = 2   # autoencoder-only epochs before the codebook goes live
    polyak: float = 0.99     # weight-averaging decay for eval/checkpoint; 0 disables
    min_epochs: int = 0      # early-stopping burn-in: no stopping before this epoch

    def __post_init__(self):
        if self.codebook_size < 2:
            raise InvalidConfig("codebook_size must be >= 2")
        tau = self.downsample
        if tau < 1 or (tau & (tau - 1)) != 0:
            raise InvalidConfig(f"downsample ratio must be a power of two, got {tau}")

    @property
    def feat_dim(self) -> int:
        return self.expr_dim + 3

    @property
    def num_stages(self) -> int:
        return self.downsample.bit_length() - 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "expr_dim", "codebook_size", "code_dim", "downsample", "hidden",
            "ema_decay", "ema_eps", "commitment_weight", "reconstruction_weight",
            "velocity_weight", "lr", "grad_clip", "batch_size", "max_epochs",
            "patience", "val_fraction", "warmup_epochs", "polyak", "min_epochs")}

    @classmethod
    def from_dict(cls, d: dict) -> "VqvaeConfig":
        return cls(**d)


@dataclass(frozen=True)
class Codebook:
    """K learned code vectors; index K is the reserved MASK symbol."""

    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.float32)
        if codes.ndim != 2 or codes.shape[0] < 2:
            raise InvalidInput("codebook must be a K-by-d matrix with K >= 2")
        if not np.all(np.isfinite(codes)):
            raise InvalidInput("codebook contains non-finite values")
        object.__setattr__(self, "codes", codes)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    @property
    def mask_id(self) -> int:
        return self.size


def nearest_code(z, codebook: Codebook) -> tuple[int, np.ndarray]:
    """Index and vector of the closest code; ties break to the lowest index."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInput("query vector must be finite")
    dists = np.sum((codebook.codes.astype(np.float64) - z) ** 2, axis=1)
    idx = int(np.argmin(dists))
    return idx, codebook.codes[idx].copy()


def quantize_sequence(latents, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise nearest-code assignment: (token indices, quantized latents)."""
    latents = np.asarray(latents, dtype=np.float64)
    d2 = (np.sum(latents ** 2, axis=1, keepdims=True)
          + np.sum(codebook.codes.astype(np.float64) ** 2, axis=1)
          - 2.0 * latents @ codebook.codes.astype(np.float64).T)
    tokens = np.argmin(d2, axis=1).astype(np.int64)
    return tokens, codebook.codes[tokens].copy()


def _norm(hidden: int) -> nn.Module:
    groups = 8 if hidden % 8 == 0 else 1
    return nn.GroupNorm(groups, hidden)


def _encoder(feat_dim: int, hidden: int, code_dim: int, stages: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv1d(feat_dim, hidden, 3, padding=1), _norm(hidden), nn.GELU()]
    for _ in range(stages):
        layers += [nn.Conv1d(hidden, hidden, 4, stride=2, padding=1), _norm(hidden), nn.GELU()]
    layers.append(nn.Conv1d(hidden, code_dim, 3, padding=1))
    return nn.Sequential(*layers)


def _decoder(feat_dim: int, hidden: int, code_dim: int, stages: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv1d(code_dim, hidden, 3, padding=1), _norm(hidden), nn.GELU()]
    for _ in range(stages):
        layers += [nn.ConvTranspose1d(hidden, hidden, 4, stride=2, padding=1), _norm(hidden), nn.GELU()]
    layers.append(nn.Conv1d(hidden, feat_dim, 3, padding=1))
    return nn.Sequential(*layers)


class VqvaeModel(nn.Module):
    def __init__(self, config: VqvaeConfig):
        super().__init__()
        self.config = config
        self.encoder = _encoder(config.feat_dim, config.hidden, config.code_dim,
                                config.num_stages)
        self.decoder = _decoder(config.feat_dim, config.hidden, config.code_dim,
                                config.num_stages)
        self.register_buffer("codes", torch.randn(config.codebook_size, config.code_dim) * 0.5)
        self.register_buffer("ema_counts", torch.ones(config.codebook_size))
        self.register_buffer("ema_sums", self.codes.clone())

    @torch.no_grad()
    def init_codebook_from(self, flat_z: torch.Tensor, gen: torch.Generator,
                           kmeans_iters: int = 10) -> None:
        """Seed codes by k-means over encoder outputs so quantization starts
        inside the latent cloud instead of fighting the commitment loss."""
        k = self.config.codebook_size
        pick = torch.randint(0, flat_z.shape[0], (k,), generator=gen)
        centers = flat_z[pick] + 0.01 * torch.randn(k, self.config.code_dim, generator=gen)
        for _ in range(kmeans_iters):
            d2 = (flat_z.pow(2).sum(1, keepdim=True) + centers.pow(2).sum(1)
                  - 2.0 * flat_z @ centers.t())
            assign = torch.argmin(d2, dim=1)
            onehot = F.one_hot(assign, k).to(flat_z.dtype)
            counts = onehot.sum(0)
            sums = onehot.t() @ flat_z
            alive = counts > 0
            centers[alive] = sums[alive] / counts[alive].unsqueeze(1)
        self.codes.copy_(centers)
        self.ema_sums.copy_(centers)
        self.ema_counts.fill_(1.0)

    @property
    def codebook(self) -> Codebook:
        return Codebook(codes=self.codes.detach().numpy().copy())

    def _check_length(self, t: int) -> None:
        if t % self.config.downsample != 0:
            raise InvalidInput(
                f"sequence length {t} not divisible by downsample ratio {self.config.downsample}")

    def encode_batch(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, d_f) -> (B, T/downsample, code_dim)."""
        self._check_length(frames.shape[1])
        return self.encoder(frames.transpose(1, 2)).transpose(1, 2)

    def decode_batch(self, latents: torch.Tensor) -> torch.Tensor:
        return self.decoder(latents.transpose(1, 2)).transpose(1, 2)

    def assign(self, flat_z: torch.Tensor) -> torch.Tensor:
        d2 = (flat_z.pow(2).sum(1, keepdim=True)
              + self.codes.pow(2).sum(1)
              - 2.0 * flat_z @ self.codes.t())
        return torch.argmin(d2, dim=1)

    def forward(self, frames: torch.Tensor):
        """Training forward: returns (recon, z, quantized_st, tokens)."""
        z = self.encode_batch(frames)
        b, n, d = z.shape
        tokens = self.assign(z.reshape(-1, d)).view(b, n)
        quant = self.codes[tokens.reshape(-1)].view(b, n, d)
        quant_st = z + (quant - z).detach()
        recon = self.decode_batch(quant_st)
        return recon, z, quant_st, tokens

    @torch.no_grad()
    def ema_update(self, flat_z: torch.Tensor, flat_tokens: torch.Tensor) -> None:
        k = self.config.codebook_size
        onehot = F.one_hot(flat_tokens, k).to(flat_z.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ flat_z
        decay = self.config.ema_decay
        self.ema_counts.mul_(decay).add_(counts, alpha=1 - decay)
        self.ema_sums.mul_(decay).add_(sums, alpha=1 - decay)
        total = self.ema_counts.sum()
        smoothed = ((self.ema_counts + self.config.ema_eps)
                    / (total + k * self.config.ema_eps) * total)
        self.codes.copy_(self.ema_sums / smoothed.unsqueeze(1))

    @torch.no_grad()
    def reseed_codes(self, dead: torch.Tensor, pool: torch.Tensor,
                     gen: torch.Generator) -> int:
        """Re-initialize unused codes from a pool of recent encoder outputs."""
        n_dead = int(dead.sum())
        if n_dead == 0 or pool.shape[0] == 0:
            return 0
        pick = torch.randint(0, pool.shape[0], (n_dead,), generator=gen)
        fresh = pool[pick]
        self.codes[dead] = fresh
        self.ema_sums[dead] = fresh
        self.ema_counts[dead] = 1.0
        return n_dead

    # numpy-facing helpers for frozen models -------------------------------

    @torch.no_grad()
    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        t = torch.as_tensor(np.asarray(frames, dtype=np.float32)).unsqueeze(0)
        return self.encode_batch(t)[0].numpy()

    @torch.no_grad()
    def decode_tokens(self, tokens, fps: int) -> MotionSequence:
        tokens = np.asarray(tokens)
        if tokens.min() < 0 or tokens.max() >= self.config.codebook_size:
            raise InvalidInput("token sequence contains MASK or out-of-range indices; "
                               "only codebook tokens are decodable")
        quant = self.codes[torch.as_tensor(tokens, dtype=torch.long)].unsqueeze(0)
        frames = self.decode_batch(quant)[0].numpy()
        return MotionSequence(frames=frames, fps=fps)


def encode(seq: MotionSequence, model: VqvaeModel) -> np.ndarray:
    """Latent sequence of a (normalized) motion sequence."""
    return model.encode_frames(seq.frames)


def encode_to_tokens(seq: MotionSequence, model: VqvaeModel) -> np.ndarray:
    """Encode then quantize; the diffusion training target."""
    latents = model.encode_frames(seq.frames)
    tokens, _ = quantize_sequence(latents, model.codebook)
    return tokens


@dataclass(frozen=True)
class VqLossTerms:
    commitment: float
    reconstruction: float
    velocity: float
    commitment_weight: float
    reconstruction_weight: float
    velocity_weight: float

    @property
    def total(self) -> float:
        return (self.commitment_weight * self.commitment
                + self.reconstruction_weight * self.reconstruction
                + self.velocity_weight * self.velocity)


def _loss_terms_torch(frames: torch.Tensor, recon: torch.Tensor,
                      z: torch.Tensor, quant: torch.Tensor):
    commitment = (z - quant.detach()).pow(2).sum(-1).sum(-1).mean()
    reconstruction = F.smooth_l1_loss(recon, frames, beta=1.0)
    velocity = F.smooth_l1_loss(recon[:, 1:] - recon[:, :-1],
                                frames[:, 1:] - frames[:, :-1], beta=1.0)
    return commitment, reconstruction, velocity


def vq_losses(frames, recon, latents, quantized,
              weights: tuple[float, float, float] = (0.02, 1.0, 0.05)) -> VqLossTerms:
    """Loss breakdown for one sequence.

    Commitment is the summed squared distance between encoder outputs and
    their (stop-gradient) codes; reconstruction and velocity are mean
    smooth-L1 on frames and on frame differences.
    """
    frames = torch.as_tensor(np.asarray(frames, dtype=np.float32)).unsqueeze(0)
    recon = torch.as_tensor(np.asarray(recon, dtype=np.float32)).unsqueeze(0)
    latents = torch.as_tensor(np.asarray(latents, dtype=np.float32)).unsqueeze(0)
    quantized = torch.as_tensor(np.asarray(quantized, dtype=np.float32)).unsqueeze(0)
    if frames.shape != recon.shape or latents.shape != quantized.shape:
        raise InvalidInput("loss inputs must be pairwise shape-consistent")
    c, r, v = _loss_terms_torch(frames, recon, latents, quantized)
    return VqLossTerms(commitment=float(c), reconstruction=float(r), velocity=float(v),
                       commitment_weight=weights[0], reconstruction_weight=weights[1],
                       velocity_weight=weights[2])


@dataclass
class VqvaeCheckpoint:
    """Frozen training artifact: weights, codebook, normalization, config."""

    config: VqvaeConfig
    norm_stats: NormStats
    state: dict[str, np.ndarray]
    epochs_trained: int
    config_hash: str = ""

    def build_model(self) -> VqvaeModel:
        model = VqvaeModel(self.config)
        model.load_state_dict({k: torch.as_tensor(v.copy()) for k, v in self.state.items()})
        model.eval()
        return model

    def save(self, path) -> None:
        meta = {
            "kind": "vqvae",
            "config": self.config.to_dict(),
            "epochs_trained": self.epochs_trained,
            "config_hash": self.config_hash,
        }
        tensors = {"norm.mean": self.norm_stats.mean.astype(np.float32),
                   "norm.std": self.norm_stats.std.astype(np.float32)}
        tensors.update({f"model.{k}": v for k, v in sorted(self.state.items())})
        write_tensor_container(path, CHECKPOINT_MAGIC, meta, tensors)

    @classmethod
    def load(cls, path) -> "VqvaeCheckpoint":
        meta, tensors = read_tensor_container(path, CHECKPOINT_MAGIC)
        if meta.get("kind") != "vqvae":
            raise InvalidInput(f"{path} is not a vqvae checkpoint (kind={meta.get('kind')!r})")
        stats = NormStats(mean=tensors.pop("norm.mean"), std=tensors.pop("norm.std"))
        state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
        return cls(config=VqvaeConfig.from_dict(meta["config"]), norm_stats=stats,
                   state=state, epochs_trained=meta["epochs_trained"],
                   config_hash=meta.get("config_hash", ""))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_vqvae(sequences: list[MotionSequence], config: VqvaeConfig, seed: int = 0,
                resume: VqvaeCheckpoint | None = None, config_hash: str = ""
                ) -> tuple[VqvaeCheckpoint, list[dict]]:
    """Train on raw motion sequences; z-score stats are fit on the train split.

    Early stopping: patience epochs without validation improvement. Returns
    the checkpoint (weights at the last epoch) and per-epoch loss history.
    """
    if not sequences:
        raise TrainingError("training dataset is empty")
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise InvalidInput("all training sequences must share a frame count")
    t_len = lengths.pop()
    if t_len % config.downsample != 0:
        raise InvalidInput(f"sequence length {t_len} not divisible by "
                           f"downsample ratio {config.downsample}")
    if sequences[0].feat_dim != config.feat_dim:
        raise InvalidInput(f"sequences have {sequences[0].feat_dim} features, "
                           f"config expects {config.feat_dim}")

    rng = np.random.default_rng(seed)
    n = len(sequences)
    order = rng.permutation(n)
    n_val = int(round(config.val_fraction * n)) if n > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    if resume is not None:
        stats = resume.norm_stats
    else:
        stats = fit_norm_stats([sequences[i] for i in train_idx])
    frames = np.stack([normalize(s, stats).frames for s in sequences])
    fps = sequences[0].fps
    x_train = torch.as_tensor(frames[train_idx])
    x_val = torch.as_tensor(frames[val_idx]) if n_val else None

    torch.manual_seed(seed)
    model = VqvaeModel(config)
    if resume is not None:
        model.load_state_dict({k: torch.as_tensor(v.copy()) for k, v in resume.state.items()})
    start_epoch = resume.epochs_trained if resume is not None else 0
    reseed_gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    avg_model = None
    if config.polyak > 0:
        avg_model = VqvaeModel(config)
        avg_model.load_state_dict(model.state_dict())

    @torch.no_grad()
    def polyak_step():
        if avg_model is None:
            return
        for pa, p in zip(avg_model.state_dict().values(), model.state_dict().values()):
            if pa.dtype.is_floating_point:
                pa.mul_(config.polyak).add_(p, alpha=1 - config.polyak)
            else:
                pa.copy_(p)

    @torch.no_grad()
    def polyak_sync(rows: torch.Tensor | None = None):
        if avg_model is None:
            return
        if rows is None:
            avg_model.load_state_dict(model.state_dict())
        else:
            avg_model.codes[rows] = model.codes[rows]
            avg_model.ema_sums[rows] = model.ema_sums[rows]
            avg_model.ema_counts[rows] = model.ema_counts[rows]

    eval_model = avg_model if avg_model is not None else model

    history: list[dict] = []
    best_val = float("inf")
    stale = 0
    epochs_done = start_epoch
    warmup_left = config.warmup_epochs if resume is None else 0
    for epoch in range(start_epoch, start_epoch + config.max_epochs):
        warming = epoch - start_epoch < warmup_left
        model.train()
        usage = torch.zeros(config.codebook_size)
        pool = None
        sums = np.zeros(4)
        n_batches = 0
        for batch in _epoch_batches(len(train_idx), config.batch_size, rng):
            x = x_train[torch.as_tensor(batch)]
            if warming:
                # autoencoder-only phase: the codebook is not live yet
                z = model.encode_batch(x)
                recon = model.decode_batch(z)
                c = torch.zeros(())
                r = F.smooth_l1_loss(recon, x, beta=1.0)
                v = F.smooth_l1_loss(recon[:, 1:] - recon[:, :-1],
                                     x[:, 1:] - x[:, :-1], beta=1.0)
            else:
                recon, z, quant_st, tokens = model(x)
                quant = model.codes[tokens.reshape(-1)].view_as(z)
                c, r, v = _loss_terms_torch(x, recon, z, quant)
            loss = (config.commitment_weight * c + config.reconstruction_weight * r
                    + config.velocity_weight * v)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if not warming:
                flat_z = z.detach().reshape(-1, config.code_dim)
                flat_tokens = tokens.reshape(-1)
                model.ema_update(flat_z, flat_tokens)
                usage += torch.bincount(flat_tokens, minlength=config.codebook_size).float()
                pool = flat_z
                polyak_step()
            sums += np.array([float(loss), float(c), float(r), float(v)])
            n_batches += 1
        if warming:
            if epoch - start_epoch == warmup_left - 1:
                with torch.no_grad():
                    head = x_train[: min(len(train_idx), 256)]
                    model.init_codebook_from(
                        model.encode_batch(head).reshape(-1, config.code_dim), reseed_gen)
                polyak_sync()
        else:
            dead = usage == 0
            if model.reseed_codes(dead, pool, reseed_gen):
                polyak_sync(rows=dead)

        train_avg = sums / max(n_batches, 1)
        if x_val is not None:
            eval_model.eval()
            with torch.no_grad():
                if warming:
                    recon = eval_model.decode_batch(eval_model.encode_batch(x_val))
                    c = torch.zeros(())
                    r = F.smooth_l1_loss(recon, x_val, beta=1.0)
                    v = F.smooth_l1_loss(recon[:, 1:] - recon[:, :-1],
                                         x_val[:, 1:] - x_val[:, :-1], beta=1.0)
                else:
                    recon, z, _, tokens = eval_model(x_val)
                    quant = eval_model.codes[tokens.reshape(-1)].view_as(z)
                    c, r, v = _loss_terms_torch(x_val, recon, z, quant)
                val_total = float(config.commitment_weight * c
                                  + config.reconstruction_weight * r
                                  + config.velocity_weight * v)
                # stopping monitor: the output-quality terms; the commitment
                # sum tracks codebook churn, not reconstruction quality
                monitored = float(config.reconstruction_weight * r
                                  + config.velocity_weight * v)
        else:
            val_total = train_avg[0]
            monitored = (config.reconstruction_weight * train_avg[2]
                         + config.velocity_weight * train_avg[3])
        history.append({
            "epoch": epoch + 1, "train_total": train_avg[0], "train_commitment": train_avg[1],
            "train_reconstruction": train_avg[2], "train_velocity": train_avg[3],
            "val_total": val_total, "val_quality": monitored,
            "codes_used": int((usage > 0).sum()),
        })
        epochs_done = epoch + 1
        if warming or epoch + 1 < start_epoch + config.min_epochs:
            continue  # the stopping clock starts once quantization settles
        if monitored < best_val:
            best_val = monitored
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    state = {k: v.detach().numpy().astype(np.float32).copy()
             for k, v in eval_model.state_dict().items()}
    ckpt = VqvaeCheckpoint(config=config, norm_stats=stats, state=state,
                           epochs_trained=epochs_done, config_hash=config_hash)
    return ckpt, history
