"""Cosine-schedule diffusion over action-progress chunks with a DiT denoiser."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import DiTConfig
from .layers import Attention, MLP, sincos_1d, timestep_embedding


def cosine_alpha_bar(t_d, T: int = 100, s: float = 0.008) -> float:
    """Closed-form squared-cosine cumulative signal level at step ``t_d`` of ``T``."""
    if not 0 <= t_d <= T:
        raise ValueError(f"t_d={t_d} outside [0, {T}]")
    f = lambda u: math.cos(math.pi / 2 * (u + s) / (1 + s)) ** 2  # noqa: E731
    return f(t_d / T) / f(0.0)


class DiffusionSchedule:
    """Discrete schedule with ``T + 1`` cumulative products ``alpha_bar[0..T]``.

    Betas derived from the closed form are clipped at 0.999 so the final level
    stays strictly positive.
    """

    def __init__(self, T: int = 100, s: float = 0.008, sample_steps: int = 10):
        if T < 1 or sample_steps < 1:
            raise ValueError("T and sample_steps must be positive")
        self.T, self.s, self.sample_steps = T, s, sample_steps
        ab = np.array([cosine_alpha_bar(t, T, s) for t in range(T + 1)])
        betas = np.clip(1 - ab[1:] / ab[:-1], 0.0, 0.999)
        self.alpha_bar = torch.tensor(np.concatenate([[1.0], np.cumprod(1 - betas)]), dtype=torch.float64)

    def constants(self) -> dict:
        return {"T": self.T, "s": self.s, "sample_steps": self.sample_steps}

    def timesteps(self, steps: int | None = None) -> list[int]:
        """Evenly spaced integer steps from T down to 0 (``steps + 1`` values)."""
        steps = self.sample_steps if steps is None else steps
        if steps < 1:
            raise ValueError("need at least one sampling step")
        return [int(round(v)) for v in np.linspace(self.T, 0, steps + 1)]


def noise_target(y: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    """``sqrt(ab) * y + sqrt(1 - ab) * eps``; ``alpha_bar`` scalar or per-sample (B,)."""
    if y.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(eps.shape)}")
    ab = torch.as_tensor(alpha_bar, dtype=y.dtype)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (y.ndim - 1)))
    return ab.sqrt() * y + (1 - ab).sqrt() * eps


# channel mapping between environment units and the diffusion space [-1, 1]


def encode_chunk(actions: np.ndarray, progress: np.ndarray | None, max_step: float) -> np.ndarray:
    """(n, 7) expert actions (+ (n,) progress) -> (n, 7 or 8) in [-1, 1]."""
    delta = np.clip(actions[:, :6] / max_step, -1.0, 1.0)
    grip = 2.0 * actions[:, 6:7] - 1.0
    parts = [delta, grip]
    if progress is not None:
        parts.append(2.0 * np.asarray(progress, dtype=np.float64)[:, None] - 1.0)
    return np.concatenate(parts, axis=1)


@dataclass
class ActionProgressChunk:
    raw: torch.Tensor  # (B, n, C) sampler output in diffusion space
    delta: torch.Tensor  # (B, n, 6) environment units
    gripper_raw: torch.Tensor  # (B, n)
    gripper: torch.Tensor  # (B, n) thresholded at 0
    progress: torch.Tensor | None  # (B, n) in [0, 1]


def decode_chunk(y: torch.Tensor, max_step: float) -> ActionProgressChunk:
    prog = None
    if y.shape[-1] >= 8:
        prog = ((y[..., 7] + 1) / 2).clamp(0.0, 1.0)
    return ActionProgressChunk(
        raw=y,
        delta=y[..., :6].clamp(-1.0, 1.0) * max_step,
        gripper_raw=y[..., 6],
        gripper=(y[..., 6] > 0).long(),
        progress=prog,
    )


class AdaLNBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = MLP(dim, 4 * dim)
        self.mod = nn.Linear(dim, 6 * dim)

    def forward(self, x, c):
        s1, b1, g1, s2, b2, g2 = self.mod(c)[:, None].chunk(6, dim=-1)
        x = x + (1 + g1) * self.attn(self.ln1(x) * (1 + s1) + b1)
        return x + (1 + g2) * self.mlp(self.ln2(x) * (1 + s2) + b2)


class DiTDenoiser(nn.Module):
    """Transformer over the n chunk steps, conditioned through adaptive layer norm on
    (action latent, stage embedding of the affordance latent, diffusion time).

    The output is always a noise estimate.  With ``prediction="v"`` the network
    head estimates ``v = sqrt(ab) eps - sqrt(1 - ab) y`` and the noise follows as
    ``sqrt(1 - ab) y_noisy + sqrt(ab) v``, which keeps the clean-sample estimate
    well conditioned near pure noise.
    """

    def __init__(self, cfg: DiTConfig, d_model: int, channels: int):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        w = cfg.width
        self.inp = nn.Linear(channels, w)
        self.register_buffer("pos", sincos_1d(torch.arange(cfg.chunk), w).to(torch.get_default_dtype()), persistent=False)
        self.stage = nn.Linear(4 * d_model, d_model)
        self.time = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.cond = nn.Sequential(nn.Linear(2 * d_model + w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(AdaLNBlock(w, cfg.heads) for _ in range(cfg.layers))
        self.final_ln = nn.LayerNorm(w, elementwise_affine=False)
        self.final_mod = nn.Linear(w, 2 * w)
        self.out = nn.Linear(w, channels)
        if cfg.prediction not in ("eps", "v"):
            raise ValueError(f"unknown prediction target {cfg.prediction!r}")
        ab = DiffusionSchedule(cfg.T, cfg.cosine_s).alpha_bar.to(torch.get_default_dtype())
        self.register_buffer("alpha_bar", ab, persistent=False)

    def stage_embedding(self, affordance: torch.Tensor | None, action_latent: torch.Tensor) -> torch.Tensor:
        """Linear map of the four concatenated affordance latents; zeros when absent."""
        if affordance is None:
            return torch.zeros_like(action_latent)
        return self.stage(affordance.flatten(1))

    def condition(self, action_latent: torch.Tensor, affordance: torch.Tensor | None) -> torch.Tensor:
        """Time-independent part of the conditioning, (B, 2 * d_model)."""
        return torch.cat([action_latent, self.stage_embedding(affordance, action_latent)], dim=-1)

    def forward(self, y_noisy: torch.Tensor, cond: torch.Tensor, t_d: torch.Tensor) -> torch.Tensor:
        if not bool(torch.isfinite(y_noisy).all()) or not bool(torch.isfinite(cond).all()):
            raise FloatingPointError("denoiser received non-finite input")
        n = y_noisy.shape[1]
        dtype = self.inp.weight.dtype
        pos = self.pos if n == len(self.pos) else sincos_1d(torch.arange(n), self.cfg.width).to(dtype)
        x = self.inp(y_noisy) + pos[None, :n]
        temb = self.time(timestep_embedding(t_d, self.cfg.width).to(dtype))
        c = self.cond(torch.cat([cond, temb], dim=-1))
        for blk in self.blocks:
            x = blk(x, c)
        shift, scale = self.final_mod(c)[:, None].chunk(2, dim=-1)
        out = self.out(self.final_ln(x) * (1 + scale) + shift)
        if self.cfg.prediction == "eps":
            return out
        ab = self.alpha_bar.to(out.dtype)[t_d].view(-1, 1, 1)
        return (1 - ab).sqrt() * y_noisy + ab.sqrt() * out


def ddim_sample(
    denoiser: DiTDenoiser,
    cond: torch.Tensor,
    schedule: DiffusionSchedule,
    noise: torch.Tensor,
    steps: int | None = None,
    trained: bool = True,
) -> torch.Tensor:
    """Deterministic (eta = 0) reverse process from ``noise`` (B, n, C) at t=T to t=0.

    The clean-sample estimate is clipped to [-1, 1] at every step.
    """
    if not trained:
        warnings.warn("sampling from an untrained denoiser", RuntimeWarning, stacklevel=2)
    ts = schedule.timesteps(steps)
    ab = schedule.alpha_bar
    x = noise
    for t, t_prev in zip(ts[:-1], ts[1:]):
        a_t = ab[t].to(x.dtype)
        a_p = ab[t_prev].to(x.dtype)
        tt = torch.full((len(x),), t, dtype=torch.long)
        eps = denoiser(x, cond, tt)
        x0 = ((x - (1 - a_t).sqrt() * eps) / a_t.sqrt()).clamp(-1.0, 1.0)
        eps = (x - a_t.sqrt() * x0) / (1 - a_t).sqrt()
        x = a_p.sqrt() * x0 + (1 - a_p).sqrt() * eps
    return x
