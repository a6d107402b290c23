"""GPT-style fusion transformer with a block-wise structured attention mask."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import BackboneConfig
from .encoders import ACTION_QUERY, AFFORDANCE_QUERY, CONTEXT, ContextSequence
from .layers import Block


class UntaggedTokenError(ValueError):
    pass


class NonFiniteActivationError(FloatingPointError):
    pass


def build_structured_mask(
    roles: torch.Tensor, timesteps: torch.Tensor, action_reads_affordance: bool = True
) -> torch.Tensor:
    """Boolean (S, S) matrix, ``A[q, k]`` True when query token q may attend to key k.

    Context attends causally over timesteps; affordance queries read all context
    and themselves only; the action query reads context, the affordance queries
    (unless disabled) and itself; context never reads any query.
    """
    roles = torch.as_tensor(roles)
    timesteps = torch.as_tensor(timesteps)
    if roles.shape != timesteps.shape or roles.ndim != 1:
        raise UntaggedTokenError("roles and timesteps must be equal-length 1-D tags")
    valid = (roles == CONTEXT) | (roles == AFFORDANCE_QUERY) | (roles == ACTION_QUERY)
    if not bool(valid.all()) or bool((timesteps < 0).any()):
        raise UntaggedTokenError("every token needs a role and a nonnegative timestep")
    S = len(roles)
    rq, rk = roles[:, None], roles[None, :]
    eye = torch.eye(S, dtype=torch.bool)
    ctx_q, ctx_k = rq == CONTEXT, rk == CONTEXT
    causal = timesteps[None, :] <= timesteps[:, None]
    mask = ctx_q & ctx_k & causal
    mask |= (rq == AFFORDANCE_QUERY) & ctx_k
    mask |= (rq == ACTION_QUERY) & ctx_k
    if action_reads_affordance:
        mask |= (rq == ACTION_QUERY) & (rk == AFFORDANCE_QUERY)
    mask |= eye & ~ctx_q  # queries see themselves
    return mask


@dataclass
class AffordanceLatent:
    global_: torch.Tensor
    local: torch.Tensor
    spatial: torch.Tensor
    dynamic: torch.Tensor

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.global_, self.local, self.spatial, self.dynamic], dim=1)

    def detach(self) -> "AffordanceLatent":
        return AffordanceLatent(*(v.detach() for v in (self.global_, self.local, self.spatial, self.dynamic)))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, action_reads_affordance: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.action_reads_affordance = action_reads_affordance
        # 4 affordance sub-queries (global, local, spatial, dynamic) then the action-progress query
        self.queries = nn.Parameter(torch.randn(5, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.heads) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self._mask_cache: dict = {}

    def mask_for(self, seq: ContextSequence) -> torch.Tensor:
        key = (tuple(seq.roles.tolist()), tuple(seq.timesteps.tolist()))
        if key not in self._mask_cache:
            self._mask_cache[key] = build_structured_mask(seq.roles, seq.timesteps, self.action_reads_affordance)
        return self._mask_cache[key]

    def run(self, seq: ContextSequence) -> torch.Tensor:
        """All final-layer token outputs, (B, S, d)."""
        mask = self.mask_for(seq)
        x = seq.tokens
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteActivationError("backbone produced non-finite activations")
        return x

    def forward(self, seq: ContextSequence) -> tuple[AffordanceLatent, torch.Tensor]:
        x = self.run(seq)
        aff = x[:, seq.affordance_slice]
        return AffordanceLatent(aff[:, 0], aff[:, 1], aff[:, 2], aff[:, 3]), x[:, seq.action_index]
