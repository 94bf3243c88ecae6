"""Denoising network over corrupted token sequences.

Self-attention blocks over token positions with learned position embeddings,
a sinusoidal step embedding added everywhere, and cross-attention onto the
fused speaker condition in every block. The output head scores only the K
codebook tokens, so the clean-token prediction assigns MASK zero mass by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .conditioning import CrossAttention


@dataclass
class DenoiserConfig:
    codebook_size: int = 256
    num_positions: int = 30
    width: int = 512
    depth: int = 4
    heads: int = 8
    cond_dim: int | None = 512       # None disables conditioning entirely
    cond_positions: int | None = None  # defaults to num_positions

    def to_dict(self) -> dict:
        return {"codebook_size": self.codebook_size, "num_positions": self.num_positions,
                "width": self.width, "depth": self.depth, "heads": self.heads,
                "cond_dim": self.cond_dim, "cond_positions": self.cond_positions}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def sinusoidal_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32,
                                                        device=steps.device) / max(half - 1, 1))
    args = steps.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class DenoiserBlock(nn.Module):
    def __init__(self, width: int, heads: int, cond_dim: int | None):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = CrossAttention(width, width, width, heads)
        self.cross_attn = None
        if cond_dim is not None:
            self.norm_cross = nn.LayerNorm(width)
            self.cross_attn = CrossAttention(width, cond_dim, width, heads)
        self.norm_ff = nn.LayerNorm(width)
        self.ff = nn.Sequential(
            nn.Linear(width, 4 * width),
            nn.GELU(),
            nn.Linear(4 * width, width),
        )

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h)
        if self.cross_attn is not None and cond is not None:
            x = x + self.cross_attn(self.norm_cross(x), cond)
        x = x + self.ff(self.norm_ff(x))
        return x


class TokenDenoiser(nn.Module):
    """Predicts per-position clean-token logits from a corrupted sequence."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.token_emb = nn.Embedding(config.codebook_size + 1, w)
        self.pos_emb = nn.Parameter(torch.zeros(config.num_positions, w))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.cond_pos_emb = None
        if config.cond_dim is not None:
            # the condition sequence needs its own positional code, or
            # cross-attention can only route it by content similarity
            self.cond_pos_emb = nn.Parameter(torch.zeros(config.cond_positions
                                                         or config.num_positions,
                                                         config.cond_dim))
            nn.init.normal_(self.cond_pos_emb, std=0.02)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(
            [DenoiserBlock(w, config.heads, config.cond_dim) for _ in range(config.depth)])
        self.out_norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, config.codebook_size)

    @property
    def num_positions(self) -> int:
        return self.config.num_positions

    def forward(self, tokens: torch.Tensor, step: torch.Tensor,
                cond: torch.Tensor | None = None) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        b, n = tokens.shape
        step = torch.as_tensor(step, device=tokens.device).reshape(-1)
        if step.shape[0] == 1 and b > 1:
            step = step.expand(b)
        x = self.token_emb(tokens) + self.pos_emb[:n][None]
        x = x + self.time_mlp(sinusoidal_embedding(step, self.config.width))[:, None, :]
        if cond is not None and self.cond_pos_emb is not None:
            cond = cond + self.cond_pos_emb[: cond.shape[1]][None]
        for block in self.blocks:
            x = block(x, cond)
        return self.head(self.out_norm(x))

    def predict_x0_probs(self, tokens, t: int, cond) -> np.ndarray:
        """Clean-token distribution per position, float64 rows summing to 1."""
        tokens_t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        cond_t = None
        if cond is not None and self.config.cond_dim is not None:
            vectors = getattr(cond, "vectors", cond)
            cond_t = torch.as_tensor(np.asarray(vectors), dtype=torch.float32).unsqueeze(0)
        with torch.no_grad():
            logits = self(tokens_t, torch.tensor([t]), cond_t)
        return torch.softmax(logits[0].to(torch.float64), dim=-1).numpy()
