"""Mask-and-replace discrete diffusion over token sequences.

Each forward step keeps a token, resamples it uniformly over the codebook,
or replaces it with the absorbing MASK symbol (index `codebook_size`). The
per-step probabilities define column-stochastic transition matrices whose
cumulative products have a closed form; the exact posterior of a step given
the clean sequence drives both training and reverse sampling. The denoiser
predicts the clean-token distribution and the reverse kernel marginalizes
the posterior against that prediction.

All chain arithmetic is float64. Probabilities are floored at 1e-30 inside
logs to guard underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateState, InvalidConfig, InvalidInput, ModelError

LOG_FLOOR = 1e-30
_SIMPLEX_TOL = 1e-12


@dataclass
class ScheduleConfig:
    """Linear corruption ramps: mask_prob 0 -> mask_max, swap_prob 0 -> swap_scale/K."""

    num_steps: int = 100
    mask_max: float = 0.9
    swap_scale: float = 0.1

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "mask_max": self.mask_max,
                "swap_scale": self.swap_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        return cls(**d)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step and cumulative corruption probabilities for t = 1..num_steps.

    Arrays are indexed [t-1]. For every step, keep + K*swap + mask = 1, and
    the cumulative arrays satisfy the same identity.
    """

    keep_prob: np.ndarray
    swap_prob: np.ndarray
    mask_prob: np.ndarray
    keep_cum: np.ndarray
    swap_cum: np.ndarray
    mask_cum: np.ndarray
    codebook_size: int

    @property
    def num_steps(self) -> int:
        return self.keep_prob.shape[0]

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def step(self, t: int) -> tuple[float, float, float]:
        """(keep, swap, mask) for step t in 1..num_steps."""
        self._check_t(t)
        return float(self.keep_prob[t - 1]), float(self.swap_prob[t - 1]), float(self.mask_prob[t - 1])

    def cumulative(self, t: int) -> tuple[float, float, float]:
        """(keep, swap, mask) of the t-step composition; t = 0 is the identity."""
        if t == 0:
            return 1.0, 0.0, 0.0
        self._check_t(t)
        return float(self.keep_cum[t - 1]), float(self.swap_cum[t - 1]), float(self.mask_cum[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise InvalidInput(f"step {t} outside 1..{self.num_steps}")

    @classmethod
    def from_rates(cls, keep, swap, mask, codebook_size: int) -> "DiffusionSchedule":
        keep = np.asarray(keep, dtype=np.float64)
        swap = np.asarray(swap, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        k = int(codebook_size)
        if k < 2:
            raise InvalidConfig("codebook_size must be >= 2")
        if not (keep.shape == swap.shape == mask.shape) or keep.ndim != 1 or keep.size < 1:
            raise InvalidConfig("rate arrays must be equal-length 1-D with at least one step")
        for name, arr in (("keep", keep), ("swap", swap), ("mask", mask)):
            if np.any(arr < -_SIMPLEX_TOL) or np.any(arr > 1 + _SIMPLEX_TOL):
                raise InvalidConfig(f"{name} probabilities outside [0, 1]")
        if np.max(np.abs(keep + k * swap + mask - 1.0)) > 1e-9:
            raise InvalidConfig("per-step probabilities must satisfy keep + K*swap + mask = 1")
        keep_cum = np.cumprod(keep)
        mask_cum = 1.0 - np.cumprod(1.0 - mask)
        swap_cum = (1.0 - keep_cum - mask_cum) / k
        if np.any(swap_cum < -_SIMPLEX_TOL):
            raise InvalidConfig("cumulative swap probability went negative")
        swap_cum = np.clip(swap_cum, 0.0, None)
        return cls(keep_prob=keep, swap_prob=swap, mask_prob=mask,
                   keep_cum=keep_cum, swap_cum=swap_cum, mask_cum=mask_cum,
                   codebook_size=k)


def build_schedule(num_steps: int, codebook_size: int,
                   config: ScheduleConfig | None = None) -> DiffusionSchedule:
    """Default linear schedule; its terminal mask mass is >= mask_max."""
    if num_steps < 1:
        raise InvalidConfig("num_steps must be >= 1")
    cfg = config or ScheduleConfig(num_steps=num_steps)
    frac = np.arange(1, num_steps + 1, dtype=np.float64) / num_steps
    mask = cfg.mask_max * frac
    swap = (cfg.swap_scale / codebook_size) * frac
    keep = 1.0 - codebook_size * swap - mask
    return DiffusionSchedule.from_rates(keep, swap, mask, codebook_size)


def _matrix(k: int, keep: float, swap: float, mask: float) -> np.ndarray:
    q = np.zeros((k + 1, k + 1), dtype=np.float64)
    q[:k, :k] = swap
    q[np.arange(k), np.arange(k)] += keep
    q[k, :k] = mask
    q[k, k] = 1.0
    return q


def transition_matrix(sched: DiffusionSchedule, t: int) -> np.ndarray:
    """Column-stochastic single-step matrix; entry [m, n] = P(next=m | prev=n)."""
    return _matrix(sched.codebook_size, *sched.step(t))


def cumulative_matrix(sched: DiffusionSchedule, t: int) -> np.ndarray:
    """Column-stochastic t-step composition in closed form."""
    return _matrix(sched.codebook_size, *sched.cumulative(t))


def prior_distribution(sched: DiffusionSchedule) -> np.ndarray:
    """Terminal-step marginal under a uniform clean-token start.

    With the default schedule the cumulative keep probability at the last
    step is exactly 0, so this is mask_cum on MASK and swap_cum per token.
    """
    kc, sc, mc = sched.cumulative(sched.num_steps)
    k = sched.codebook_size
    prior = np.full(k + 1, sc + kc / k, dtype=np.float64)
    prior[k] = mc
    return prior


def _check_tokens(tokens, k: int, allow_mask: bool) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InvalidInput("token sequence must be 1-D and nonempty")
    hi = k if allow_mask else k - 1
    if tokens.min() < 0 or tokens.max() > hi:
        raise InvalidInput(f"token values must lie in [0, {hi}]")
    return tokens.astype(np.int64)


def q_sample(x0, t: int, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a clean sequence by the t-step cumulative kernel."""
    x0 = _check_tokens(x0, sched.codebook_size, allow_mask=False)
    kc, _, mc = sched.cumulative(t)
    r = rng.random(x0.shape[0])
    uniform = rng.integers(0, sched.codebook_size, size=x0.shape[0])
    out = np.where(r < mc, sched.mask_id, np.where(r < mc + kc, x0, uniform))
    return out.astype(np.int64)


def q_sample_step(x_prev, t: int, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """One forward step from x_{t-1} to x_t; MASK is absorbing."""
    x_prev = _check_tokens(x_prev, sched.codebook_size, allow_mask=True)
    kp, _, mp = sched.step(t)
    r = rng.random(x_prev.shape[0])
    uniform = rng.integers(0, sched.codebook_size, size=x_prev.shape[0])
    moved = np.where(r < mp, sched.mask_id, np.where(r < mp + kp, x_prev, uniform))
    return np.where(x_prev == sched.mask_id, sched.mask_id, moved).astype(np.int64)


def _schedule_scalars(sched: DiffusionSchedule, t, device, dtype=torch.float64):
    """Per-row (keep, swap, mask) at step t, cumulative at t and t-1, as tensors."""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.min() < 1 or t.max() > sched.num_steps:
        raise InvalidInput(f"step values must lie in 1..{sched.num_steps}")
    idx = t - 1
    def grab(arr):
        return torch.as_tensor(arr[idx], dtype=dtype, device=device)
    keep, swap, mask = grab(sched.keep_prob), grab(sched.swap_prob), grab(sched.mask_prob)
    kc, sc, mc = grab(sched.keep_cum), grab(sched.swap_cum), grab(sched.mask_cum)
    prev = idx - 1
    def grab_prev(arr, identity):
        vals = np.where(prev >= 0, arr[np.maximum(prev, 0)], identity)
        return torch.as_tensor(vals, dtype=dtype, device=device)
    kcp = grab_prev(sched.keep_cum, 1.0)
    scp = grab_prev(sched.swap_cum, 0.0)
    mcp = grab_prev(sched.mask_cum, 0.0)
    return keep, swap, mask, kc, sc, mc, kcp, scp, mcp


def posterior_mix_torch(x0_probs: torch.Tensor, tokens: torch.Tensor, t,
                        sched: DiffusionSchedule) -> torch.Tensor:
    """Reverse-step distribution sum_j q(prev | cur, clean=j) * x0_probs[j].

    `x0_probs`: (B, N, K) rows over clean tokens; `tokens`: (B, N) current
    tokens (MASK allowed); `t`: per-row step, scalar or length B. Returns
    (B, N, K+1). Differentiable in `x0_probs`. At t = 1 this reduces to the
    clean-token prediction itself with zero MASK mass.
    """
    if x0_probs.dim() == 2:
        x0_probs = x0_probs.unsqueeze(0)
        tokens = tokens.unsqueeze(0)
    b, n, k = x0_probs.shape
    if k != sched.codebook_size:
        raise InvalidInput(f"x0_probs last dim {k} != codebook size {sched.codebook_size}")
    device = x0_probs.device
    keep, swap, mask, kc, sc, mc, kcp, scp, mcp = _schedule_scalars(sched, t, device)
    if keep.shape[0] == 1 and b > 1:
        keep, swap, mask = keep.expand(b), swap.expand(b), mask.expand(b)
        kc, sc, mc = kc.expand(b), sc.expand(b), mc.expand(b)
        kcp, scp, mcp = kcp.expand(b), scp.expand(b), mcp.expand(b)
    col = lambda v: v.view(-1, 1, 1)

    probs = x0_probs.to(torch.float64)
    is_mask = tokens == sched.mask_id
    onehot = torch.zeros(b, n, k, dtype=torch.float64, device=device)
    safe_tokens = torch.where(is_mask, torch.zeros_like(tokens), tokens)
    onehot.scatter_(2, safe_tokens.unsqueeze(-1), 1.0)
    onehot = onehot * (~is_mask).unsqueeze(-1)

    # current token observed as a codebook token: Bayes against the cumulative
    # kernel, then one reverse step
    denom = col(kc) * onehot + col(sc)
    if torch.any((denom <= 0) & (probs > 0) & (~is_mask).unsqueeze(-1)):
        bad = torch.nonzero((denom <= 0) & (probs > 0) & (~is_mask).unsqueeze(-1))[0]
        raise DegenerateState(
            f"zero-probability denominator at position {int(bad[1])}: "
            f"observed token has no mass under the cumulative kernel")
    w = probs / denom.clamp(min=LOG_FLOOR)
    w_sum = w.sum(dim=-1, keepdim=True)
    nonmask_rows = (col(keep) * onehot + col(swap)) * (col(kcp) * w + col(scp) * w_sum)

    # current token is MASK: reverse step either un-masks to a codebook token
    # or stays masked
    mc_rows = mc.view(-1, 1).expand(b, n)
    if torch.any(is_mask & (mc_rows <= 0)):
        bad = torch.nonzero(is_mask & (mc_rows <= 0))[0]
        raise DegenerateState(
            f"zero-probability denominator at position {int(bad[1])}: "
            f"MASK observed but the schedule assigns it no mass")
    mask_rows_tokens = col(mask) * (col(kcp) * probs + col(scp)) / col(mc).clamp(min=LOG_FLOOR)
    mask_rows_mask = (col(mcp) / col(mc).clamp(min=LOG_FLOOR)).expand(b, n, 1)

    out_tokens = torch.where(is_mask.unsqueeze(-1), mask_rows_tokens, nonmask_rows)
    out_mask = torch.where(is_mask.unsqueeze(-1), mask_rows_mask,
                           torch.zeros(b, n, 1, dtype=torch.float64, device=device))
    return torch.cat([out_tokens, out_mask], dim=-1)


def q_posterior(x0_probs, tokens, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Exact posterior over the previous step, marginalized over `x0_probs`.

    For a one-hot row this is Bayes' rule on the transition and cumulative
    matrices. Valid for 2 <= t <= num_steps; rows of `x0_probs` must be
    normalized distributions over the codebook (MASK excluded).
    """
    if not 2 <= t <= sched.num_steps:
        raise InvalidInput(f"q_posterior needs 2 <= t <= {sched.num_steps}, got {t}")
    x0_probs = np.asarray(x0_probs, dtype=np.float64)
    tokens = _check_tokens(tokens, sched.codebook_size, allow_mask=True)
    if x0_probs.ndim != 2 or x0_probs.shape != (tokens.shape[0], sched.codebook_size):
        raise InvalidInput(f"x0_probs must be (len(tokens), {sched.codebook_size})")
    if np.any(x0_probs < 0) or np.max(np.abs(x0_probs.sum(axis=1) - 1.0)) > 1e-6:
        raise InvalidInput("x0_probs rows must be normalized distributions")
    with torch.no_grad():
        mix = posterior_mix_torch(torch.from_numpy(x0_probs),
                                  torch.from_numpy(tokens), t, sched)
    return mix.squeeze(0).numpy()


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    r = rng.random((probs.shape[0], 1))
    return (cdf < r).sum(axis=1).astype(np.int64)


def p_sample(model, tokens, t: int, cond, sched: DiffusionSchedule,
             rng: np.random.Generator) -> np.ndarray:
    """One reverse step; at t = 1 returns the argmax clean-token prediction."""
    tokens = _check_tokens(tokens, sched.codebook_size, allow_mask=True)
    sched._check_t(t)
    probs = np.asarray(model.predict_x0_probs(tokens, t, cond), dtype=np.float64)
    if probs.shape != (tokens.shape[0], sched.codebook_size):
        raise ModelError(f"denoiser returned shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ModelError("denoiser produced non-finite probabilities")
    if t == 1:
        return probs.argmax(axis=1).astype(np.int64)
    mix = q_posterior(probs, tokens, t, sched)
    return _sample_rows(mix, rng)


def sample(model, cond, sched: DiffusionSchedule, rng: np.random.Generator,
           length: int) -> np.ndarray:
    """Full reverse chain from the terminal prior down to a clean sequence."""
    prior = prior_distribution(sched)
    tokens = _sample_rows(np.tile(prior, (length, 1)), rng)
    for t in range(sched.num_steps, 0, -1):
        tokens = p_sample(model, tokens, t, cond, sched, rng)
    return tokens


@dataclass(frozen=True)
class DiffusionLossTerms:
    """Variational-bound pieces for one corruption draw.

    `step_kl` is the posterior-matching KL at the drawn step (the clean-token
    cross-entropy when t = 1); `prior_kl` is the exact terminal term, constant
    in the model; `x0_nll` is the auxiliary clean-token loss.
    """

    step_kl: float
    prior_kl: float
    x0_nll: float
    aux_weight: float
    t: int

    @property
    def vlb(self) -> float:
        return self.step_kl + self.prior_kl

    @property
    def total(self) -> float:
        return self.vlb + self.aux_weight * self.x0_nll


def prior_kl(x0, sched: DiffusionSchedule) -> float:
    """KL of the cumulative corruption at the final step against the prior."""
    x0 = _check_tokens(x0, sched.codebook_size, allow_mask=False)
    kc, sc, mc = sched.cumulative(sched.num_steps)
    k = sched.codebook_size
    prior = prior_distribution(sched)
    q_col = np.full(k + 1, sc, dtype=np.float64)
    q_col[k] = mc
    # per position only the diagonal entry differs
    base = q_col * np.log(np.maximum(q_col, LOG_FLOOR) / np.maximum(prior, LOG_FLOOR))
    base_sum = base.sum()
    diag = kc + sc
    diag_term = diag * np.log(max(diag, LOG_FLOOR) / max(prior[0], LOG_FLOOR))
    per_pos = base_sum - base[0] + diag_term
    return float(per_pos)


def loss_terms_torch(model, x0: torch.Tensor, x_t: torch.Tensor, t,
                     cond: torch.Tensor | None, sched: DiffusionSchedule
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (step_kl, x0_nll), each averaged over positions then batch.

    `x0`, `x_t`: (B, N) long; `t`: length-B steps; `cond`: (B, M, d) or None.
    """
    if x0.dim() == 1:
        x0, x_t = x0.unsqueeze(0), x_t.unsqueeze(0)
    logits = model(x_t, torch.as_tensor(t, device=x0.device).reshape(-1), cond)
    if not torch.all(torch.isfinite(logits)):
        raise ModelError("denoiser produced non-finite logits")
    logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
    x0_nll = -logp.gather(2, x0.unsqueeze(-1)).squeeze(-1).mean(dim=1)

    b, n, k = logp.shape
    onehot = torch.zeros(b, n, k, dtype=torch.float64, device=x0.device)
    onehot.scatter_(2, x0.unsqueeze(-1), 1.0)
    with torch.no_grad():
        q_true = posterior_mix_torch(onehot, x_t, t, sched)
    p_mix = posterior_mix_torch(logp.exp(), x_t, t, sched)
    log_ratio = (torch.log(q_true.clamp(min=LOG_FLOOR))
                 - torch.log(p_mix.clamp(min=LOG_FLOOR)))
    step_kl = (q_true * log_ratio).sum(dim=-1).mean(dim=1)
    return step_kl.mean(), x0_nll.mean()


def diffusion_loss(model, x0, cond, sched: DiffusionSchedule,
                   rng: np.random.Generator, aux_weight: float = 1e-3,
                   t: int | None = None) -> DiffusionLossTerms:
    """Draw a step uniformly, corrupt, and report all loss components."""
    x0 = _check_tokens(x0, sched.codebook_size, allow_mask=False)
    if t is None:
        t = int(rng.integers(1, sched.num_steps + 1))
    x_t = q_sample(x0, t, sched, rng)
    cond_t = None
    if cond is not None:
        cond_t = torch.as_tensor(np.asarray(cond), dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        step_kl, x0_nll = loss_terms_torch(
            model, torch.from_numpy(x0), torch.from_numpy(x_t), [t], cond_t, sched)
    return DiffusionLossTerms(step_kl=float(step_kl), prior_kl=prior_kl(x0, sched),
                              x0_nll=float(x0_nll), aux_weight=aux_weight, t=t)
