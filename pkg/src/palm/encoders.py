"""Trainable multimodal encoders and token-sequence assembly."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .layers import Attention, Block, MLP, sincos_2d

CONTEXT, AFFORDANCE_QUERY, ACTION_QUERY = 0, 1, 2
AFFORDANCE_KINDS = ("global", "local", "spatial", "dynamic")


class ShapeMismatchError(ValueError):
    pass


class OutOfVocabularyError(KeyError):
    pass


class HistoryLengthError(ValueError):
    pass


class Tokenizer:
    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        out = []
        for w in re.findall(r"[a-z]+|,", text.lower()):
            if w not in self.index:
                raise OutOfVocabularyError(w)
            out.append(self.index[w])
        return out

    def batch(self, texts: list[str]) -> torch.Tensor:
        ids = [self.encode(t) for t in texts]
        L = max(len(i) for i in ids)
        out = torch.zeros(len(ids), L, dtype=torch.long)  # 0 is <pad>
        for r, i in enumerate(ids):
            out[r, : len(i)] = torch.tensor(i, dtype=torch.long)
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({w: i for i, w in enumerate(self.words)}, indent=1))

    @classmethod
    def load(cls, path) -> "Tokenizer":
        d = json.loads(Path(path).read_text())
        return cls([w for w, _ in sorted(d.items(), key=lambda kv: kv[1])])


class ImageEncoder(nn.Module):
    """Patch-embedding transformer: (H/p)^2 patch tokens plus one summary token."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.patch = cfg.patch_size
        g = cfg.image_size // cfg.patch_size
        self.embed = nn.Conv2d(3, cfg.vision_width, cfg.patch_size, cfg.patch_size)
        self.summary = nn.Parameter(torch.randn(1, 1, cfg.vision_width) * 0.02)
        self.register_buffer("pos", sincos_2d(g, g, cfg.vision_width), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.vision_width, cfg.vision_heads) for _ in range(cfg.vision_layers))
        self.norm = nn.LayerNorm(cfg.vision_width)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) in [0, 1] -> (B, (H/p)^2 + 1, vision_width)."""
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeMismatchError(
                f"expected {self.image_size}x{self.image_size} raster, got {tuple(images.shape[-2:])}"
            )
        x = self.embed(images).flatten(2).transpose(1, 2) + self.pos.to(images.dtype)
        x = torch.cat([self.summary.expand(len(x), -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class PerceiverResampler(nn.Module):
    """Learned latents cross-attend to [inputs; latents]; the output count is fixed."""

    def __init__(
        self, in_dim: int, out_dim: int, num_latents: int, layers: int, heads: int, temperature: float | None = None
    ):
        super().__init__()
        self.latents = nn.Parameter(torch.randn(num_latents, in_dim) * 0.02)
        self.layers = nn.ModuleList()
        for _ in range(layers):
            self.layers.append(
                nn.ModuleDict(
                    {
                        "ln_x": nn.LayerNorm(in_dim),
                        "ln_l": nn.LayerNorm(in_dim),
                        "attn": Attention(in_dim, heads, qk_temperature=temperature),
                        "ln_ff": nn.LayerNorm(in_dim),
                        "ff": MLP(in_dim, 4 * in_dim),
                    }
                )
            )
        self.norm = nn.LayerNorm(in_dim)
        self.proj = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] < 1:
            raise ShapeMismatchError("resampler needs at least one input token")
        lat = self.latents.expand(len(x), -1, -1)
        for L in self.layers:
            ctx = torch.cat([L["ln_x"](x), L["ln_l"](lat)], dim=1)
            lat = lat + L["attn"](L["ln_l"](lat), context=ctx)
            lat = lat + L["ff"](L["ln_ff"](lat))
        return self.proj(self.norm(lat))


class TextEncoder(nn.Module):
    """Lookup-and-pool over the closed vocabulary into one token.

    Word and position embeddings pass through a per-token MLP so the pool keeps
    object/container bindings.  The pool is a mean plus an attention read-out
    whose query is the controller-stage embedding, letting the stage select its
    clause.  Stage index ``max_stages + 1`` means "no stage information".
    """

    def __init__(self, cfg: EncoderConfig, max_words: int = 64):
        super().__init__()
        d = cfg.d_model
        self.tokenizer = Tokenizer(cfg.vocab)
        self.embed = nn.Embedding(len(self.tokenizer), d, padding_idx=0)
        self.pos = nn.Parameter(torch.randn(max_words, d) * 0.02)
        self.token_mlp = MLP(d, 2 * d)
        self.stage = nn.Embedding(cfg.max_stages + 2, d)
        self.key = nn.Linear(d, d)
        self.proj = nn.Linear(2 * d, d)
        self.no_stage = cfg.max_stages + 1

    def forward(self, token_ids: torch.Tensor, stage: torch.Tensor | None = None) -> torch.Tensor:
        if token_ids.shape[1] > len(self.pos):
            raise ShapeMismatchError(f"instruction longer than {len(self.pos)} words")
        if stage is None:
            stage = torch.full((len(token_ids),), self.no_stage, dtype=torch.long, device=token_ids.device)
        keep = token_ids != 0
        h = self.embed(token_ids) + self.pos[: token_ids.shape[1]]
        h = h + self.token_mlp(h)
        w = keep.to(h.dtype)[..., None]
        mean = (h * w).sum(1) / w.sum(1).clamp_min(1.0)
        q = self.stage(stage.clamp(0, self.no_stage))
        scores = (self.key(h) @ q[:, :, None])[..., 0] / h.shape[-1] ** 0.5
        scores = scores.masked_fill(~keep, float("-inf"))
        att = torch.softmax(scores, dim=1).nan_to_num(0.0)
        read = (att[..., None] * h).sum(1)
        return self.proj(torch.cat([mean, read], dim=-1)) + q


class StateEncoder(nn.Module):
    """6-D pose and one-hot gripper through separate linear maps, then a 2-layer MLP."""

    def __init__(self, d_model: int):
        super().__init__()
        half = d_model // 2
        self.pose = nn.Linear(6, half)
        self.grip = nn.Linear(2, d_model - half)
        self.mlp = nn.Sequential(nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, d_model))

    def forward(self, pose: torch.Tensor, gripper: torch.Tensor) -> torch.Tensor:
        if not bool(((gripper == 0) | (gripper == 1)).all()):
            raise ValueError("gripper state must be binary")
        onehot = F.one_hot(gripper.long(), 2).to(pose.dtype)
        return self.mlp(torch.cat([self.pose(pose), self.grip(onehot)], dim=-1))


@dataclass
class ContextSequence:
    tokens: torch.Tensor  # (B, S, d)
    timesteps: torch.Tensor  # (S,) long
    roles: torch.Tensor  # (S,) long: CONTEXT / AFFORDANCE_QUERY / ACTION_QUERY

    @property
    def affordance_slice(self) -> slice:
        idx = torch.nonzero(self.roles == AFFORDANCE_QUERY).flatten()
        return slice(int(idx[0]), int(idx[-1]) + 1)

    @property
    def action_index(self) -> int:
        return int(torch.nonzero(self.roles == ACTION_QUERY).flatten()[0])


class MultimodalEncoder(nn.Module):
    """Encodes both views, instruction and state and lays out the backbone input."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.image = ImageEncoder(cfg)
        self.resample_base = PerceiverResampler(
            cfg.vision_width, d, cfg.resampled_tokens, cfg.resampler_layers, cfg.resampler_heads, cfg.resampler_temperature
        )
        self.resample_hand = PerceiverResampler(
            cfg.vision_width, d, cfg.resampled_tokens, cfg.resampler_layers, cfg.resampler_heads, cfg.resampler_temperature
        )
        self.text = TextEncoder(cfg)
        self.state = StateEncoder(d)
        self.time_embed = nn.Parameter(torch.randn(cfg.history, d) * 0.02)
        self.type_embed = nn.Parameter(torch.randn(4, d) * 0.02)  # text, base, hand, state

    @property
    def tokenizer(self) -> Tokenizer:
        return self.text.tokenizer

    def encode_views(self, images: torch.Tensor, view: str) -> torch.Tensor:
        """(U, 3, H, W) in [0, 1] -> (U, resampled_tokens, d_model)."""
        tokens = self.image(images)
        return (self.resample_base if view == "base" else self.resample_hand)(tokens)

    def assemble(
        self,
        base_tokens: torch.Tensor,  # (B, T, R, d)
        hand_tokens: torch.Tensor,
        states: torch.Tensor,  # (B, T, 7)
        token_ids: torch.Tensor,
        stage: torch.Tensor | None,
        queries: torch.Tensor,  # (5, d): 4 affordance sub-queries + 1 action query
    ) -> ContextSequence:
        B, T, R, d = base_tokens.shape
        if T != self.cfg.history:
            raise HistoryLengthError(f"expected {self.cfg.history} frames, got {T}")
        te = self.type_embed
        text = self.text(token_ids, stage)[:, None] + te[0]
        st = self.state(states[..., :6], states[..., 6]) + te[3]  # (B, T, d)
        per_step = torch.cat([base_tokens + te[1], hand_tokens + te[2], st[:, :, None]], dim=2)
        per_step = per_step + self.time_embed[None, :, None]
        ctx = per_step.reshape(B, T * (2 * R + 1), d)
        q = queries[None].expand(B, -1, -1) + self.time_embed[-1]
        tokens = torch.cat([text, ctx, q], dim=1)
        timesteps = torch.cat(
            [
                torch.zeros(1, dtype=torch.long),
                torch.arange(T).repeat_interleave(2 * R + 1),
                torch.full((5,), T - 1, dtype=torch.long),
            ]
        )
        roles = torch.cat(
            [
                torch.zeros(1 + T * (2 * R + 1), dtype=torch.long),
                torch.full((4,), AFFORDANCE_QUERY, dtype=torch.long),
                torch.tensor([ACTION_QUERY]),
            ]
        )
        return ContextSequence(tokens, timesteps, roles)


def images_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(..., H, W, 3) uint8 -> (..., 3, H, W) float in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(frames)).to(dtype) / 255.0
    return t.movedim(-1, -3)


def encode_image(encoder: MultimodalEncoder, raster: np.ndarray) -> torch.Tensor:
    """Patch tokens for a single (H, W, 3) uint8 raster."""
    if raster.ndim != 3 or raster.shape[0] != encoder.cfg.image_size or raster.shape[1] != encoder.cfg.image_size:
        raise ShapeMismatchError(f"raster shape {raster.shape} does not match config")
    dtype = encoder.image.embed.weight.dtype
    return encoder.image(images_to_tensor(raster[None], dtype))[0]
