"""Model configuration and named size presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .env import vocabulary


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    vision_width: int = 192
    vision_layers: int = 2
    vision_heads: int = 6
    resampled_tokens: int = 8
    resampler_layers: int = 3
    resampler_heads: int = 8
    resampler_temperature: float | None = 20.0  # cosine-attention logit scale at init; None for plain attention
    vocab: list[str] = field(default_factory=vocabulary)
    max_stages: int = 8
    d_model: int = 192
    history: int = 7

    def validate(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"raster side {self.image_size} not divisible by patch {self.patch_size}")
        for f in ("vision_width", "d_model", "resampled_tokens"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")


@dataclass
class BackboneConfig:
    d_model: int = 192
    layers: int = 6
    heads: int = 6

    def validate(self):
        if self.d_model % self.heads:
            raise ValueError(f"width {self.d_model} not divisible by {self.heads} heads")


@dataclass
class HeadConfig:
    width: int = 128
    heads: int = 4
    layers: int = 2
    grid_stride: int = 4  # token grid stride of the transformer decoders
    feature_dim: int = 32
    num_candidates: int = 8
    latent_dim: int = 16  # dynamic VAE z size
    mask_prior: float | None = 0.01  # initial foreground probability of the mask decoders


@dataclass
class DiTConfig:
    width: int = 192
    layers: int = 4
    heads: int = 4
    chunk: int = 3
    T: int = 100
    sample_steps: int = 10
    cosine_s: float = 0.008
    prediction: str = "v"  # network head target: "v" or "eps"; the output is a noise estimate either way


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    dit: DiTConfig = field(default_factory=DiTConfig)
    progress: bool = True  # False drops the progress channel (7-dim chunks)
    inverse_dynamics: bool = True  # False: action query cannot read the affordance latent

    @property
    def action_channels(self) -> int:
        return 8 if self.progress else 7

    def validate(self):
        self.encoder.validate()
        self.backbone.validate()
        if self.encoder.d_model != self.backbone.d_model:
            raise ValueError("encoder and backbone widths differ")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        sub = {"encoder": EncoderConfig, "backbone": BackboneConfig, "heads": HeadConfig, "dit": DiTConfig}
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = sub[f.name](**d[f.name]) if f.name in sub else d[f.name]
        return cls(**kw)


def preset(name: str, image_size: int | None = None) -> ModelConfig:
    """``default`` is the scaled-down reference size; ``desk`` is the ~1-3 M parameter
    configuration for CPU experiments; ``tiny`` is for unit tests."""
    if name == "default":
        cfg = ModelConfig()
    elif name == "desk":
        cfg = ModelConfig(
            encoder=EncoderConfig(
                image_size=32,
                patch_size=4,
                vision_width=48,
                vision_layers=1,
                vision_heads=4,
                resampled_tokens=2,
                resampler_layers=1,
                resampler_heads=4,
                d_model=96,
            ),
            backbone=BackboneConfig(d_model=96, layers=3, heads=4),
            heads=HeadConfig(width=64, heads=4, layers=2, grid_stride=8, feature_dim=16),
            dit=DiTConfig(width=96, layers=2, heads=4),
        )
    elif name == "tiny":
        cfg = ModelConfig(
            encoder=EncoderConfig(
                image_size=16,
                patch_size=4,
                vision_width=16,
                vision_layers=1,
                vision_heads=2,
                resampled_tokens=2,
                resampler_layers=1,
                resampler_heads=2,
                d_model=16,
            ),
            backbone=BackboneConfig(d_model=16, layers=2, heads=2),
            heads=HeadConfig(width=16, heads=2, layers=2, grid_stride=4, feature_dim=8, latent_dim=4),
            dit=DiTConfig(width=16, layers=2, heads=2),
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    if image_size is not None:
        cfg.encoder.image_size = image_size
    return cfg
