"""The assembled policy: encoders, structured backbone, affordance heads and DiT."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import AffordanceLatent, Backbone
from .config import ModelConfig
from .diffusion import DiffusionSchedule, DiTDenoiser, ddim_sample
from .encoders import MultimodalEncoder, images_to_tensor
from .heads import AffordanceHeads


class PalmPolicy(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.encoder.d_model
        self.encoder = MultimodalEncoder(cfg.encoder)
        self.backbone = Backbone(cfg.backbone, action_reads_affordance=cfg.inverse_dynamics)
        self.heads = AffordanceHeads(d, cfg.heads, cfg.encoder.image_size)
        self.dit = DiTDenoiser(cfg.dit, d, cfg.action_channels)
        self.schedule = DiffusionSchedule(cfg.dit.T, cfg.dit.cosine_s, cfg.dit.sample_steps)
        self.trained = False

    @property
    def dtype(self):
        return self.backbone.queries.dtype

    def sections(self) -> dict[str, nn.Module]:
        return {"encoder": self.encoder, "backbone": self.backbone, "heads": self.heads, "dit": self.dit}

    def encode_frames(self, base: np.ndarray | torch.Tensor, hand: np.ndarray | torch.Tensor):
        """(U, H, W, 3) uint8 views -> two (U, R, d) token blocks."""
        if isinstance(base, np.ndarray):
            base = images_to_tensor(base, self.dtype)
            hand = images_to_tensor(hand, self.dtype)
        return self.encoder.encode_views(base, "base"), self.encoder.encode_views(hand, "hand")

    def latents(
        self,
        base_tokens: torch.Tensor,
        hand_tokens: torch.Tensor,
        states: torch.Tensor,
        token_ids: torch.Tensor,
        stage: torch.Tensor | None,
    ) -> tuple[AffordanceLatent, torch.Tensor]:
        if not self.cfg.progress:
            stage = None
        # pixel-coordinate poses centred and scaled to roughly unit range
        half = self.cfg.encoder.image_size / 2
        states = torch.cat([(states[..., :6] - half) / half * 2, states[..., 6:]], dim=-1)
        seq = self.encoder.assemble(base_tokens, hand_tokens, states, token_ids, stage, self.backbone.queries)
        return self.backbone(seq)

    def condition(self, latent: AffordanceLatent, action_latent: torch.Tensor, detach_affordance: bool = False):
        if not self.cfg.inverse_dynamics:
            return self.dit.condition(action_latent, None)
        if detach_affordance:
            latent = latent.detach()
        return self.dit.condition(action_latent, latent.stacked())

    @torch.no_grad()
    def sample(self, cond: torch.Tensor, noise: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        return ddim_sample(self.dit, cond, self.schedule, noise, steps, trained=self.trained)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
