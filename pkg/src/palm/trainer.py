"""Joint optimisation of affordance and diffusion objectives, with checkpointing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ModelConfig
from .dataset import TrajectoryRecord
from .diffusion import encode_chunk, noise_target
from .heads import FrozenFeatureEncoder
from .losses import AFFORDANCE_TERMS, LossWeights, affordance_total_loss, diffusion_loss
from .model import PalmPolicy
from .supervision import SupervisionConfig, build_sample, history_indices, progress_labels, stage_labels

log = logging.getLogger(__name__)

LOSS_KEYS = AFFORDANCE_TERMS + ("diffusion",)


class EmptyDatasetError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    window: int = 8  # consecutive samples per episode drawn together (shares frame encodings)
    grad_clip: float = 1.0
    warmup_steps: int = 0
    pretrain_frames: bool = False
    no_affordance: bool = False
    no_inverse_dynamics: bool = False
    no_progress: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs > 0 and self.window > 0):
            raise ValueError("lr, batch_size, epochs and window must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, base: ModelConfig) -> ModelConfig:
        """Apply the architecture-changing ablation flags to ``base``."""
        cfg = ModelConfig.from_dict(base.to_dict())
        if self.no_progress:
            cfg.progress = False
        if self.no_inverse_dynamics:
            cfg.inverse_dynamics = False
        return cfg


class SampleBank:
    """All training windows of a dataset with targets precomputed once.

    Frames are stored once per episode; samples reference them by index so a
    batch can encode each distinct frame a single time.
    """

    def __init__(self, trajs: list[TrajectoryRecord], sup: SupervisionConfig, feature_dim: int, tokenizer):
        if not trajs:
            raise EmptyDatasetError("dataset has no episodes")
        self.sup = sup
        enc = FrozenFeatureEncoder(feature_dim)
        base, hand, offsets = [], [], []
        off = 0
        cols: dict[str, list] = {k: [] for k in (
            "frames", "states", "ep", "stage", "y", "global_mask", "object_feature", "local_heatmap",
            "spatial_points", "spatial_valid", "dynamic_mask", "future_pixels", "t")}
        self.token_ids = []
        self.episode_ranges = []
        P = sup.num_points
        for e, tr in enumerate(trajs):
            base.append(tr.base)
            hand.append(tr.hand)
            offsets.append(off)
            self.token_ids.append(tokenizer.encode(tr.instruction))
            prog = progress_labels(tr)
            stages = stage_labels(tr, sup.stage_phi)
            start = len(cols["t"])
            for t in range(tr.num_frames - sup.n):
                s = build_sample(tr, t, sup, encoder=enc, progress=prog, stages=stages)
                cols["frames"].append(history_indices(t, sup.history) + off)
                cols["states"].append(s.states)
                cols["ep"].append(e)
                cols["t"].append(t)
                cols["stage"].append(s.stage)
                cols["y"].append(encode_chunk(s.actions, s.progress, tr.max_step))
                tg = s.targets
                cols["global_mask"].append(tg.global_mask)
                cols["object_feature"].append(tg.object_feature)
                cols["local_heatmap"].append(tg.local_heatmap)
                sp = np.zeros((P, 2))
                sp[: len(tg.spatial_points)] = tg.spatial_points
                cols["spatial_points"].append(sp)
                cols["spatial_valid"].append(np.arange(P) < len(tg.spatial_points))
                cols["dynamic_mask"].append(tg.dynamic_mask)
                cols["future_pixels"].append(np.round(tg.masked_future_pixels * 255).astype(np.uint8))
            self.episode_ranges.append((start, len(cols["t"])))
            off += tr.num_frames
        self.base = np.concatenate(base)
        self.hand = np.concatenate(hand)
        self.max_len = max(len(i) for i in self.token_ids)
        for k, v in cols.items():
            setattr(self, k, np.stack(v))
        self.raster = self.base.shape[1]

    def __len__(self) -> int:
        return len(self.t)

    def steps_per_epoch(self, cfg: TrainConfig) -> int:
        return -(-len(self.frames) // cfg.batch_size)

    def epoch_order(self, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
        """Deterministic batches for ``epoch``: shuffled runs of ``window`` consecutive samples.

        Every epoch yields exactly ``steps_per_epoch`` batches of near-equal size.
        """
        rng = np.random.default_rng([cfg.seed, epoch])
        groups = []
        for a, b in self.episode_ranges:
            phase = int(rng.integers(0, cfg.window))
            cuts = sorted({a, b, *range(a + phase, b, cfg.window)})
            groups.extend(np.arange(lo, hi) for lo, hi in zip(cuts[:-1], cuts[1:]))
        flat = np.concatenate([groups[g] for g in rng.permutation(len(groups))])
        return np.array_split(flat, self.steps_per_epoch(cfg))

    def batch(self, idx: np.ndarray, dtype, progress: bool, whole_frame: bool = False) -> dict:
        frames = self.frames[idx]
        uniq, inv = np.unique(frames, return_inverse=True)
        ids = np.zeros((len(idx), self.max_len), dtype=np.int64)
        for r, e in enumerate(self.ep[idx]):
            ids[r, : len(self.token_ids[e])] = self.token_ids[e]
        y = self.y[idx] if progress else self.y[idx][..., :7]
        to = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(dtype)  # noqa: E731
        dmask = self.dynamic_mask[idx]
        if whole_frame:
            dmask = np.ones_like(dmask)
        return {
            "base": self.base[uniq],
            "hand": self.hand[uniq],
            "inverse": torch.from_numpy(inv.reshape(frames.shape)),
            "states": to(self.states[idx]),
            "token_ids": torch.from_numpy(ids),
            "stage": torch.from_numpy(self.stage[idx]),
            "y": to(y),
            "global_mask": to(self.global_mask[idx]),
            "object_feature": to(self.object_feature[idx]),
            "local_heatmap": to(self.local_heatmap[idx]),
            "spatial_points": to(self.spatial_points[idx]),
            "spatial_valid": torch.from_numpy(self.spatial_valid[idx]),
            "dynamic_mask": torch.from_numpy(dmask),
            "masked_future_pixels": self._future(idx, dmask, dtype, whole_frame),
        }

    def _future(self, idx, dmask, dtype, whole_frame):
        if whole_frame:
            # the future frame is exactly n steps after the sample's last history frame
            pix = self.base[self.frames[idx][:, -1] + self.sup.n]
        else:
            pix = self.future_pixels[idx]
        t = torch.from_numpy(np.ascontiguousarray(pix)).to(dtype).permute(0, 3, 1, 2) / 255.0
        return t * torch.from_numpy(dmask).to(dtype)[:, None]


def lr_factor(step: int, total: int, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    return 0.5 * (1 + math.cos(math.pi * min(step - warmup, span) / span))


class Trainer:
    def __init__(self, model: PalmPolicy, cfg: TrainConfig, total_steps: int):
        self.model = model
        self.cfg = cfg
        self.total_steps = total_steps
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(0.9, 0.999))
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.extra_meta: dict = {}

    def set_lr(self) -> float:
        lr = self.cfg.lr * lr_factor(self.step, self.total_steps, self.cfg.warmup_steps)
        for g in self.opt.param_groups:
            g["lr"] = lr
        return lr

    def losses(self, batch: dict) -> dict[str, torch.Tensor]:
        m, cfg, w = self.model, self.cfg, self.cfg.weights
        bt, ht = m.encode_frames(batch["base"], batch["hand"])
        inv = batch["inverse"]
        lat, act = m.latents(bt[inv], ht[inv], batch["states"], batch["token_ids"], batch["stage"])
        B = len(inv)
        parts: dict[str, torch.Tensor] = {}
        aff_weights = (w.w_global, w.w_local, w.w_spatial, w.w_dynamic, w.w_feature)
        if not cfg.no_affordance and any(aff_weights):
            noise = torch.randn(B, m.cfg.heads.latent_dim, generator=self.gen, dtype=m.dtype)
            preds = m.heads(lat, noise)
            _, parts = affordance_total_loss(preds, batch, w)
        if w.w_diffusion > 0:
            cond = m.condition(lat, act, detach_affordance=cfg.no_affordance)
            y = batch["y"]
            t_d = torch.randint(1, m.schedule.T + 1, (B,), generator=self.gen)
            eps = torch.randn(y.shape, generator=self.gen, dtype=y.dtype)
            eps_hat = m.dit(noise_target(y, eps, m.schedule.alpha_bar[t_d]), cond, t_d)
            parts["diffusion"] = w.w_diffusion * diffusion_loss(eps_hat, eps)
        return parts

    def train_step(self, batch: dict) -> dict[str, float]:
        """One optimizer update; returns the per-term losses and the learning rate."""
        self.model.train()
        lr = self.set_lr()
        parts = self.losses(batch)
        zero = torch.zeros((), dtype=self.model.dtype)
        total = sum(parts.values(), zero)
        if not bool(torch.isfinite(total)):
            raise NonFiniteLossError(f"non-finite loss at step {self.step}: { {k: float(v) for k, v in parts.items()} }")
        self.opt.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            if self.cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
            self.opt.step()
        self.step += 1
        out = {k: float(parts[k].detach()) if k in parts else 0.0 for k in LOSS_KEYS}
        out["total"] = float(total.detach())
        out["lr"] = lr
        return out

    # -------------------------------------------------------------- state
    def checkpoint_sections(self) -> dict[str, dict[str, torch.Tensor]]:
        secs = {k: mod.state_dict() for k, mod in self.model.sections().items()}
        secs["optimizer"] = ckpt.optimizer_tensors(self.opt)
        secs["rng"] = {"torch_generator": self.gen.get_state()}
        return secs

    def restore(self, sections: dict, meta: dict) -> None:
        restore_weights(self.model, sections)
        if "optimizer" in sections:
            ckpt.restore_optimizer(self.opt, sections["optimizer"])
        if "rng" in sections:
            self.gen.set_state(sections["rng"]["torch_generator"])
        self.step = int(meta["step"])


def restore_weights(model: PalmPolicy, sections: dict) -> None:
    for name, mod in model.sections().items():
        if name not in sections:
            raise ckpt.CheckpointShapeError(f"checkpoint has no section {name!r}")
        ckpt.load_module_state(mod, sections[name], name)


def checkpoint_meta(model: PalmPolicy, cfg: TrainConfig, sup: SupervisionConfig, step: int, epoch: int) -> dict:
    return {
        "model_config": model.cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "supervision": sup.to_dict(),
        "schedule": model.schedule.constants(),
        "action_channels": model.cfg.action_channels,
        "step": step,
        "epoch": epoch,
    }


def save_checkpoint(path, trainer: Trainer, sup: SupervisionConfig, epoch: int, include_state: bool = True) -> None:
    secs = trainer.checkpoint_sections()
    if not include_state:
        secs = {k: v for k, v in secs.items() if k in trainer.model.sections()}
    meta = checkpoint_meta(trainer.model, trainer.cfg, sup, trainer.step, epoch)
    ckpt.save(path, secs, {**trainer.extra_meta, **meta})


def load_checkpoint(path, dtype=torch.float32) -> tuple[PalmPolicy, dict]:
    """Rebuild the policy described by a checkpoint header and load its weights."""
    sections, meta = ckpt.load(path)
    model = PalmPolicy(ModelConfig.from_dict(meta["model_config"])).to(dtype)
    restore_weights(model, sections)
    model.trained = meta.get("step", 0) > 0
    return model, meta


def metrics_path(out: Path) -> Path:
    return out.parent / "metrics.jsonl"


def checkpoint_path(out) -> Path:
    out = Path(out)
    return out if out.suffix == ".palmckpt" else out / "model.palmckpt"


def fit(
    trajs: list[TrajectoryRecord],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out,
    sup: SupervisionConfig | None = None,
    resume=None,
    max_steps: int | None = None,
    bank: SampleBank | None = None,
    extra_meta: dict | None = None,
) -> Path:
    """Train for ``cfg.epochs`` and return the final checkpoint path.

    ``max_steps`` stops early (the learning-rate schedule still spans all
    epochs), which together with ``resume`` reproduces interrupted runs.
    ``extra_meta`` entries (for example the scene config) are copied into
    every checkpoint header.
    """
    torch.manual_seed(cfg.seed)
    sup = sup or SupervisionConfig()
    mcfg = cfg.model_config(model_cfg)
    model = PalmPolicy(mcfg)
    if bank is None:
        if not trajs:
            raise EmptyDatasetError("dataset has no episodes")
        if trajs[0].raster_size != mcfg.encoder.image_size:
            mcfg.encoder.image_size = trajs[0].raster_size
            model = PalmPolicy(mcfg)
        bank = SampleBank(trajs, sup, mcfg.heads.feature_dim, model.encoder.tokenizer)
    spe = bank.steps_per_epoch(cfg)
    trainer = Trainer(model, cfg, spe * cfg.epochs)
    trainer.extra_meta = dict(extra_meta or {})
    path = checkpoint_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    mpath = metrics_path(path)
    lines: list[str] = []
    if resume is not None:
        sections, meta = ckpt.load(resume)
        trainer.restore(sections, meta)
        if mpath.exists():
            lines = [ln for ln in mpath.read_text().splitlines() if ln and json.loads(ln)["step"] < trainer.step]
    with open(mpath, "w") as mf:
        for ln in lines:
            mf.write(ln + "\n")
        for epoch in range(trainer.step // spe, cfg.epochs):
            batches = bank.epoch_order(cfg, epoch)
            whole = cfg.pretrain_frames and epoch == 0
            for bi in range(trainer.step - epoch * spe, spe):
                if max_steps is not None and trainer.step >= max_steps:
                    model.trained = True
                    save_checkpoint(path, trainer, sup, epoch)
                    return path
                batch = bank.batch(batches[bi], model.dtype, mcfg.progress, whole_frame=whole)
                rec = trainer.train_step(batch)
                row = {"step": trainer.step - 1, "epoch": epoch, **rec}
                mf.write(json.dumps(row, sort_keys=True) + "\n")
            mf.flush()
            model.trained = True
            save_checkpoint(path, trainer, sup, epoch + 1)
            log.info("epoch %d done at step %d", epoch, trainer.step)
    return path
