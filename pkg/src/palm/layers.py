"""Transformer building blocks shared by the encoders, backbone, heads and DiT."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def sincos_1d(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = positions.to(torch.float64)[:, None] * freqs[None]
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


def sincos_2d(gh: int, gw: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine positional encoding of shape (gh * gw, dim)."""
    ys, xs = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
    d = dim // 2
    emb = torch.cat([sincos_1d(ys.reshape(-1), d), sincos_1d(xs.reshape(-1), dim - d)], dim=1)
    return emb.to(torch.get_default_dtype())


class Attention(nn.Module):
    """Multi-head attention.  With ``qk_temperature`` set, queries and keys are
    unit-normalised per head and the logit scale is learned, starting at that value."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, qk_temperature: float | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.log_scale = None
        if qk_temperature is not None:
            self.log_scale = nn.Parameter(torch.full((heads, 1, 1), math.log(qk_temperature)))
        kv_dim = kv_dim or dim
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        B, S, D = x.shape
        h = self.heads
        q = self.q(x).view(B, S, h, D // h).transpose(1, 2)
        k, v = self.kv(context).chunk(2, dim=-1)
        k = k.reshape(B, -1, h, D // h).transpose(1, 2)
        v = v.reshape(B, -1, h, D // h).transpose(1, 2)
        if self.log_scale is None:
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        else:
            q = F.normalize(q, dim=-1) * self.log_scale.exp()
            y = F.scaled_dot_product_attention(q, F.normalize(k, dim=-1), v, attn_mask=mask, scale=1.0)
        return self.out(y.transpose(1, 2).reshape(B, S, D))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block with an optional boolean attention mask."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
