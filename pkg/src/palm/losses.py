"""Affordance and diffusion objectives.

All functions accept batched tensors and average over the batch; single
instances are handled by adding a leading batch axis of one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .supervision import normalize_map


class NonBinaryTargetError(ValueError):
    pass


class EmptyPredictionError(ValueError):
    pass


class NonFinitePosteriorError(FloatingPointError):
    pass


def _check_binary(target: torch.Tensor) -> None:
    if not bool(((target == 0) | (target == 1)).all()):
        raise NonBinaryTargetError("target mask must be binary")


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Binary focal loss averaged over every pixel of every sample."""
    _check_binary(target)
    if gamma < 0 or not 0 < alpha < 1:
        raise ValueError("need gamma >= 0 and alpha in (0, 1)")
    y = target.to(logits.dtype)
    # log p_t for the true class, computed stably from logits
    log_pt = -F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    pt = log_pt.exp()
    alpha_t = alpha * y + (1 - alpha) * (1 - y)
    return (-alpha_t * (1 - pt) ** gamma * log_pt).mean()


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """Soft Dice over the last two axes, averaged over leading axes."""
    _check_binary(target)
    p = torch.sigmoid(logits)
    y = target.to(logits.dtype)
    inter = (p * y).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + y.sum(dim=(-2, -1)) + smooth
    return (1 - 2 * inter / denom).mean()


def kl_heatmap_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """KL(target || prediction) between l1-normalized maps over the last two axes.

    The prediction is squashed by a sigmoid before normalization; target
    pixels with zero mass contribute nothing.
    """
    if bool((target < 0).any()):
        raise ValueError("target heatmap must be nonnegative")
    t = normalize_map(target.to(logits.dtype), eps)
    p = normalize_map(torch.sigmoid(logits), eps)
    pos = t > 0
    safe_t = torch.where(pos, t, torch.ones_like(t))
    terms = torch.where(pos, t * (safe_t.log() - p.clamp_min(torch.finfo(p.dtype).tiny).log()), torch.zeros_like(t))
    return terms.sum(dim=(-2, -1)).mean()


def chamfer_set_loss(pred: torch.Tensor, target: torch.Tensor, target_valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over targets of squared distance to the nearest predicted point.

    ``pred`` is (M, 2) or (B, M, 2); ``target`` (C, 2) or (B, C, 2) with an
    optional validity mask (B, C) for padded target sets.  An empty target set
    contributes 0.
    """
    single = pred.ndim == 2
    if single:
        pred, target = pred[None], target[None]
        if target_valid is not None:
            target_valid = target_valid[None]
    if pred.shape[1] == 0:
        raise EmptyPredictionError("need at least one predicted point")
    B, C = target.shape[:2]
    if target_valid is None:
        target_valid = torch.ones(B, C, dtype=torch.bool, device=pred.device)
    if C == 0:
        return pred.sum() * 0.0
    d2 = ((target[:, :, None, :] - pred[:, None, :, :]) ** 2).sum(-1)  # (B, C, M)
    nearest = d2.min(dim=-1).values
    w = target_valid.to(pred.dtype)
    per = (nearest * w).sum(1) / w.sum(1).clamp_min(1.0)
    return per.mean()


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) summed over the last axis."""
    return 0.5 * (mu**2 + logvar.exp() - 1 - logvar).sum(-1)


def masked_vae_loss(
    mu: torch.Tensor,
    logvar: torch.Tensor,
    reconstruction: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    beta: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Unit-variance Gaussian NLL over masked pixels plus beta-weighted KL.

    ``reconstruction`` and ``target`` are (B, C, H, W); ``mask`` (B, H, W).
    Returns (total, reconstruction term, KL term), each averaged over the batch.
    """
    if not (bool(torch.isfinite(mu).all()) and bool(torch.isfinite(logvar).all())):
        raise NonFinitePosteriorError("posterior parameters are not finite")
    m = mask.to(reconstruction.dtype)[:, None]
    rec = (0.5 * (reconstruction - target) ** 2 * m).sum(dim=(1, 2, 3)).mean()
    kl = gaussian_kl(mu, logvar).mean()
    return rec + beta * kl, rec, kl


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return ((eps_hat - eps) ** 2).mean()


@dataclass
class LossWeights:
    w_global: float = 1.0
    w_local: float = 1.0
    w_spatial: float = 1.0
    w_dynamic: float = 1.0
    w_feature: float = 0.1
    w_diffusion: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


AFFORDANCE_TERMS = ("global", "local", "spatial", "dynamic", "feature")


def affordance_total_loss(preds, targets, weights: LossWeights) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the four affordance objectives and the feature regression.

    ``preds`` is an :class:`~palm.heads.AffordancePredictions`; ``targets`` a
    dict of batched tensors (see ``palm.trainer.collate``).  The breakdown
    holds the weighted contribution of each term, so it sums to the total.
    """
    g = focal_loss(preds.global_logits, targets["global_mask"]) + dice_loss(preds.global_logits, targets["global_mask"])
    hm = targets["local_heatmap"]
    loc = focal_loss(preds.local_logits, (hm >= 0.5).to(hm.dtype)) + kl_heatmap_loss(preds.local_logits, hm)
    sp = chamfer_set_loss(preds.spatial_points, targets["spatial_points"], targets["spatial_valid"])
    rec = preds.reconstruction(targets["dynamic_mask"])
    dyn, _, _ = masked_vae_loss(
        preds.mu, preds.logvar, rec, targets["masked_future_pixels"], targets["dynamic_mask"], weights.beta
    )
    feat = ((preds.object_feature - targets["object_feature"]) ** 2).mean()
    parts = {
        "global": weights.w_global * g,
        "local": weights.w_local * loc,
        "spatial": weights.w_spatial * sp,
        "dynamic": weights.w_dynamic * dyn,
        "feature": weights.w_feature * feat,
    }
    total = sum(parts.values())
    return total, parts
