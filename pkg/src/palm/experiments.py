"""Seeded training/evaluation grids over ablation variants."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import preset
from .dataset import TrajectoryRecord, load_dataset, record_episode
from .env import LongHorizonEnv, SceneConfig
from .losses import LossWeights
from .model import PalmPolicy
from .report import table_markdown
from .rollout import LearnedPolicy, evaluate
from .supervision import SupervisionConfig
from .trainer import SampleBank, TrainConfig, checkpoint_path, fit, load_checkpoint

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": {},
    "no_progress": {"no_progress": True},
    "no_affordance": {"no_affordance": True},
    "no_inverse_dynamics": {"no_inverse_dynamics": True},
}


@dataclass
class GridSpec:
    """What to train and evaluate.

    ``variants`` maps a name to TrainConfig ablation flags; every variant is
    trained once per seed on the same dataset and evaluated on the same
    episodes.
    """

    variants: dict[str, dict] = field(default_factory=lambda: {k: ABLATIONS[k] for k in ("full", "no_progress", "no_affordance")})
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    episodes: int = 100
    phi: float = 0.9
    perturbation: str | None = None
    sample_steps: int | None = None
    preset: str = "desk"
    train: dict = field(default_factory=dict)  # TrainConfig overrides shared by all variants
    data: str | None = None  # dataset directory; None generates ``train_episodes`` in memory
    train_episodes: int = 200
    scene: dict = field(default_factory=lambda: {"table_size": 32, "chain_length": 3})

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        spec = cls(**d)
        for name, flags in spec.variants.items():
            bad = set(flags) - {"no_progress", "no_affordance", "no_inverse_dynamics"}
            if bad:
                raise ValueError(f"variant {name!r}: unknown flags {sorted(bad)}")
        if not spec.seeds or spec.episodes < 1:
            raise ValueError("grid needs at least one seed and one evaluation episode")
        return spec

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def desk_train_config(seed: int, flags: dict, overrides: dict | None = None) -> TrainConfig:
    """Training settings of the desk-scale experiment."""
    kw = {"epochs": 8, "batch_size": 64, "weights": {"w_dynamic": 0.05}}
    kw.update(overrides or {})
    if isinstance(kw["weights"], dict):
        kw["weights"] = LossWeights(**kw["weights"])
    return TrainConfig(seed=seed, **kw, **flags)


def expert_dataset(scene: SceneConfig, n: int) -> list[TrajectoryRecord]:
    env = LongHorizonEnv(scene)
    return [record_episode(env, s) for s in range(n)]


def run_grid(spec: GridSpec, out_dir, trajs: list[TrajectoryRecord] | None = None) -> dict:
    """Train missing checkpoints under ``out_dir/<variant>/seed_<k>`` and evaluate all of them.

    Returns per-run and seed-averaged results and writes ``ablation.json`` and
    ``ablation.md`` into ``out_dir``.
    """
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = SceneConfig.from_dict({**SceneConfig().to_dict(), **spec.scene})
    model_cfg = preset(spec.preset, image_size=scene.table_size)
    sup = SupervisionConfig()
    bank = None
    runs = []
    for name, flags in spec.variants.items():
        for seed in spec.seeds:
            path = checkpoint_path(out / name / f"seed_{seed}")
            tc = desk_train_config(seed, flags, spec.train)
            t0 = time.time()
            if not path.exists():
                if trajs is None:
                    trajs = load_dataset(spec.data) if spec.data else expert_dataset(scene, spec.train_episodes)
                if bank is None:
                    tok = PalmPolicy(model_cfg).encoder.tokenizer
                    bank = SampleBank(trajs, sup, model_cfg.heads.feature_dim, tok)
                fit(trajs, model_cfg, tc, path, sup=sup, bank=bank, extra_meta={"scene": scene.to_dict()})
            train_s = time.time() - t0
            model, _ = load_checkpoint(path)
            t0 = time.time()
            rep = evaluate(LearnedPolicy(model, spec.sample_steps), scene, spec.episodes, spec.phi, spec.perturbation)
            runs.append({
                "variant": name,
                "seed": seed,
                "avg_len": rep.avg_len,
                "success_rates": rep.success_rates,
                "train_seconds": round(train_s, 1),
                "eval_seconds": round(time.time() - t0, 1),
            })
            log.info("%s seed %d: Avg. Len. %.3f", name, seed, rep.avg_len)
    summary = []
    for name in spec.variants:
        rs = [r for r in runs if r["variant"] == name]
        summary.append({
            "variant": name,
            "avg_len": float(np.mean([r["avg_len"] for r in rs])),
            "success_rates": [float(v) for v in np.mean([r["success_rates"] for r in rs], axis=0)],
            "per_seed": [r["avg_len"] for r in rs],
        })
    result = {"grid": spec.to_dict(), "runs": runs, "summary": summary}
    (out / "ablation.json").write_text(json.dumps(result, sort_keys=True, indent=1))
    (out / "ablation.md").write_text(table_markdown(summary, "variant"))
    return result
