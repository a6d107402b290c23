import numpy as np
import torch

from palm.backbone import AffordanceLatent
from palm.config import HeadConfig
from palm.heads import AffordanceHeads, FrozenFeatureEncoder
from palm.losses import LossWeights, affordance_total_loss

D = torch.float64


def make_heads(seed=0):
    torch.manual_seed(seed)
    cfg = HeadConfig(width=16, heads=2, layers=2, grid_stride=4, feature_dim=8, latent_dim=4, num_candidates=5)
    return AffordanceHeads(16, cfg, 16).to(D)


def latent(seed=0, B=2):
    g = torch.Generator().manual_seed(seed)
    return AffordanceLatent(*(torch.randn(B, 16, generator=g, dtype=D) for _ in range(4)))


def test_prediction_shapes_and_ranges():
    heads = make_heads()
    p = heads(latent(), noise=None)
    assert p.global_logits.shape == (2, 16, 16)
    assert p.local_logits.shape == (2, 16, 16)
    assert p.object_feature.shape == (2, 8)
    assert p.spatial_points.shape == (2, 5, 2)
    assert p.mu.shape == p.logvar.shape == (2, 4)
    assert p.recon_full.shape == (2, 3, 16, 16)
    big = AffordanceLatent(*(t * 1e4 for t in (latent().global_, latent().local, latent().spatial, latent().dynamic)))
    pts = heads(big).spatial_points.detach()
    assert float(pts.min()) >= 0.0 and float(pts.max()) <= 1.0
    assert torch.isfinite(heads(big).logvar).all()


def test_heads_deterministic_with_fixed_noise():
    heads = make_heads()
    a, b = heads(latent()), heads(latent())
    assert torch.equal(a.recon_full, b.recon_full) and torch.equal(a.spatial_points, b.spatial_points)
    noise = torch.randn(2, 4, dtype=D)
    assert torch.equal(heads(latent(), noise).recon_full, heads(latent(), noise).recon_full)


def test_reconstruction_zero_off_mask():
    p = make_heads()(latent())
    mask = torch.zeros(2, 16, 16, dtype=torch.bool)
    mask[:, 3:6, 4:9] = True
    rec = p.reconstruction(mask).detach()
    assert float(rec[:, :, ~mask[0]].abs().max()) == 0.0
    assert float(rec[:, :, mask[0]].abs().sum()) > 0.0


def test_each_latent_drives_only_its_head():
    heads = make_heads()
    base = latent()
    ref = heads(base)
    moved = AffordanceLatent(base.global_ + 1.0, base.local, base.spatial, base.dynamic)
    out = heads(moved)
    assert not torch.equal(out.global_logits, ref.global_logits)
    assert torch.equal(out.local_logits, ref.local_logits)
    assert torch.equal(out.spatial_points, ref.spatial_points)
    assert torch.equal(out.recon_full, ref.recon_full)


def test_mask_loss_gradient_reaches_latent():
    heads = make_heads()
    lat = latent()
    g = lat.global_.clone().requires_grad_(True)
    p = heads(AffordanceLatent(g, lat.local, lat.spatial, lat.dynamic))
    targets = {
        "global_mask": (torch.rand(2, 16, 16) > 0.5).to(D),
        "local_heatmap": torch.rand(2, 16, 16, dtype=D),
        "spatial_points": torch.rand(2, 3, 2, dtype=D),
        "spatial_valid": torch.ones(2, 3, dtype=torch.bool),
        "dynamic_mask": torch.zeros(2, 16, 16, dtype=torch.bool),
        "masked_future_pixels": torch.zeros(2, 3, 16, 16, dtype=D),
        "object_feature": torch.zeros(2, 8, dtype=D),
    }
    total, _ = affordance_total_loss(p, targets, LossWeights(w_local=0, w_spatial=0, w_dynamic=0, w_feature=0))
    total.backward()
    assert float(g.grad.abs().sum()) > 0.0


def test_frozen_feature_encoder_fixed():
    raster = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    a = FrozenFeatureEncoder(8)(raster)
    b = FrozenFeatureEncoder(8)(raster)
    assert a.shape == (4, 4, 8)
    assert np.array_equal(a, b)
    assert not any(p.requires_grad for p in FrozenFeatureEncoder(8).parameters())
