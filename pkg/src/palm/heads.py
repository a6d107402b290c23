"""Train-time decoders turning the affordance latent into supervised outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import AffordanceLatent
from .config import HeadConfig
from .layers import Block, sincos_2d


def _unpatchify(x: torch.Tensor, g: int, s: int, c: int) -> torch.Tensor:
    """(B, g*g, c*s*s) -> (B, c, g*s, g*s)."""
    B = len(x)
    x = x.view(B, g, g, c, s, s).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(B, c, g * s, g * s)


class GridDecoder(nn.Module):
    """Broadcasts a conditioning vector over a positional token grid and decodes
    each token to an s x s pixel patch.  ``layers=0`` gives a per-token MLP."""

    def __init__(
        self, in_dim: int, cfg: HeadConfig, image_size: int, channels: int, layers: int, prior: float | None = None
    ):
        super().__init__()
        self.s = cfg.grid_stride
        self.g = image_size // self.s
        self.c = channels
        self.register_buffer("pos", sincos_2d(self.g, self.g, cfg.width), persistent=False)
        self.inp = nn.Linear(in_dim, cfg.width)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(layers))
        self.mlp = nn.Sequential(nn.LayerNorm(cfg.width), nn.Linear(cfg.width, cfg.width), nn.GELU())
        self.out = nn.Linear(cfg.width, channels * self.s * self.s)
        if prior is not None:
            # sparse-foreground start so focal loss does not drive every logit negative first
            nn.init.constant_(self.out.bias, -math.log((1 - prior) / prior))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.inp(z)[:, None] + self.pos.to(z.dtype)[None]
        for blk in self.blocks:
            x = blk(x)
        return _unpatchify(self.out(self.mlp(x)), self.g, self.s, self.c)


@dataclass
class AffordancePredictions:
    global_logits: torch.Tensor  # (B, H, W)
    object_feature: torch.Tensor  # (B, feature_dim)
    local_logits: torch.Tensor  # (B, H, W)
    spatial_points: torch.Tensor  # (B, M, 2) in [0, 1]
    mu: torch.Tensor  # (B, dz)
    logvar: torch.Tensor  # (B, dz)
    recon_full: torch.Tensor  # (B, 3, H, W) decoder output from z

    def reconstruction(self, mask: torch.Tensor) -> torch.Tensor:
        """Reconstruction restricted to the dynamic-mask support (zero elsewhere)."""
        return self.recon_full * mask.to(self.recon_full.dtype)[:, None]


class AffordanceHeads(nn.Module):
    def __init__(self, d_model: int, cfg: HeadConfig, image_size: int):
        super().__init__()
        self.cfg = cfg
        self.global_dec = GridDecoder(d_model, cfg, image_size, 1, layers=0, prior=cfg.mask_prior)
        self.feature = nn.Sequential(nn.Linear(d_model, cfg.width), nn.GELU(), nn.Linear(cfg.width, cfg.feature_dim))
        self.local_dec = GridDecoder(d_model, cfg, image_size, 1, layers=cfg.layers, prior=cfg.mask_prior)
        self.spatial = nn.Sequential(
            nn.Linear(d_model, cfg.width), nn.GELU(), nn.Linear(cfg.width, 2 * cfg.num_candidates)
        )
        self.posterior = nn.Linear(d_model, 2 * cfg.latent_dim)
        self.dynamic_dec = GridDecoder(cfg.latent_dim, cfg, image_size, 3, layers=cfg.layers)

    def decode_global(self, f: torch.Tensor):
        return self.global_dec(f)[:, 0], self.feature(f)

    def decode_local(self, f: torch.Tensor) -> torch.Tensor:
        return self.local_dec(f)[:, 0]

    def decode_spatial(self, f: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.spatial(f)).view(len(f), self.cfg.num_candidates, 2)

    def decode_dynamic(self, f: torch.Tensor, noise: torch.Tensor | None = None):
        """Posterior and decoded pixels; ``noise=None`` decodes from z = mu."""
        mu, logvar = self.posterior(f).chunk(2, dim=-1)
        logvar = logvar.clamp(-10.0, 10.0)
        z = mu if noise is None else mu + (0.5 * logvar).exp() * noise
        return mu, logvar, self.dynamic_dec(z)

    def forward(self, latent: AffordanceLatent, noise: torch.Tensor | None = None) -> AffordancePredictions:
        gl, feat = self.decode_global(latent.global_)
        mu, logvar, rec = self.decode_dynamic(latent.dynamic, noise)
        return AffordancePredictions(
            global_logits=gl,
            object_feature=feat,
            local_logits=self.decode_local(latent.local),
            spatial_points=self.decode_spatial(latent.spatial),
            mu=mu,
            logvar=logvar,
            recon_full=rec,
        )


class FrozenFeatureEncoder(nn.Module):
    """Fixed random patch embedding used only to produce object-feature targets.

    Weights come from a dedicated seed and never receive gradients, so targets
    are identical across runs and across training variants.
    """

    def __init__(self, feature_dim: int, patch: int = 4, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(feature_dim, 3, patch, patch, generator=gen, dtype=torch.float64) / (3 * patch * patch) ** 0.5
        self.register_buffer("weight", w)
        self.patch = patch

    @torch.no_grad()
    def __call__(self, raster: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(raster)).to(torch.float64).permute(2, 0, 1)[None] / 255.0
        y = torch.tanh(F.conv2d(x, self.weight, stride=self.patch))
        return y[0].permute(1, 2, 0).numpy()
