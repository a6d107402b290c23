"""Command-line interface: ``palm {gen-data,train,eval,ablate,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2

log = logging.getLogger("palm")


class ValidationError(ValueError):
    pass


def env_seed() -> int | None:
    raw = os.environ.get("PALM_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"PALM_SEED must be an integer, got {raw!r}") from None


def read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ValidationError(f"{p}: expected a JSON object")
    return d


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    from .dataset import generate_dataset
    from .env import SceneConfig

    cfg = read_json(args.config)
    cfg = cfg.get("scene", cfg)
    seed = env_seed()
    if seed is not None:
        cfg["seed"] = seed
    if args.episodes < 1:
        raise ValidationError("--episodes must be positive")
    try:
        scene = SceneConfig.from_dict(cfg)
    except TypeError as e:
        raise ValidationError(f"bad scene config: {e}") from None
    scene.validate()
    m = generate_dataset(scene, args.episodes, args.out)
    print(f"wrote {len(m.episodes)} episodes to {args.out} ({len(m.discarded)} discarded)")
    return EXIT_OK


def train_settings(cfg: dict):
    """(model config, train config, supervision config) from a train JSON."""
    from .config import ModelConfig, preset
    from .supervision import SupervisionConfig
    from .trainer import TrainConfig

    unknown = set(cfg) - {"preset", "model", "train", "supervision"}
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}")
    try:
        model_cfg = ModelConfig.from_dict(cfg["model"]) if "model" in cfg else preset(cfg.get("preset", "desk"))
    except TypeError as e:
        raise ValidationError(f"bad model config: {e}") from None
    train = dict(cfg.get("train", {}))
    seed = env_seed()
    if seed is not None:
        train["seed"] = seed
    try:
        tc = TrainConfig(**train)
        sup = SupervisionConfig(**cfg.get("supervision", {}))
    except TypeError as e:
        raise ValidationError(f"bad train config: {e}") from None
    model_cfg.validate()
    return model_cfg, tc, sup


def cmd_train(args) -> int:
    from .dataset import DatasetManifest, load_dataset
    from .trainer import fit

    model_cfg, tc, sup = train_settings(read_json(args.config))
    if args.epochs is not None:
        tc.epochs = args.epochs
    if not (Path(args.data) / "manifest.json").is_file():
        raise ValidationError(f"no dataset manifest in {args.data}")
    manifest = DatasetManifest.load(args.data)
    trajs = load_dataset(args.data)
    model_cfg.encoder.image_size = manifest.raster_size
    torch.manual_seed(tc.seed)
    path = fit(trajs, model_cfg, tc, args.out, sup=sup, resume=args.resume, max_steps=args.max_steps,
               extra_meta={"scene": manifest.scene})
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .env import SceneConfig
    from .report import emit_report
    from .rollout import LearnedPolicy, evaluate
    from .trainer import load_checkpoint

    if not Path(args.ckpt).is_file():
        raise ValidationError(f"checkpoint not found: {args.ckpt}")
    if args.episodes < 1:
        raise ValidationError("--episodes must be positive")
    if not 0 < args.phi <= 1:
        raise ValidationError(f"--phi must lie in (0, 1], got {args.phi}")
    if args.sample_steps < 1:
        raise ValidationError("--sample-steps must be positive")
    model, meta = load_checkpoint(args.ckpt)
    if "scene" not in meta:
        raise ValidationError("checkpoint does not record a scene configuration")
    scene = SceneConfig.from_dict(meta["scene"])
    offset = env_seed() or 0
    rep = evaluate(LearnedPolicy(model, args.sample_steps), scene, args.episodes, args.phi, args.perturb,
                   seed_offset=offset)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    emit_report(rep, out)
    print(f"Avg. Len. {rep.avg_len:.3f}  SR {[round(s, 3) for s in rep.success_rates]}  report: {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import GridSpec, run_grid

    spec = GridSpec.from_dict(read_json(args.grid))
    seed = env_seed()
    if seed is not None:
        spec.seeds = [seed]
    result = run_grid(spec, args.ckpt_dir)
    for row in result["summary"]:
        print(f"{row['variant']:>22s}  Avg. Len. {row['avg_len']:.3f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .report import emit_report, load_report

    if not Path(args.report).is_file():
        raise ValidationError(f"report not found: {args.report}")
    try:
        rep = load_report(args.report)
    except (json.JSONDecodeError, TypeError) as e:
        raise ValidationError(f"{args.report}: not an evaluation report ({e})") from None
    paths = emit_report(rep, args.out)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .rollout import PERTURBATIONS

    p = argparse.ArgumentParser(prog="palm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="record expert episodes")
    g.add_argument("--config", help="scene config JSON")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON with optional preset/model/train/supervision keys")
    t.add_argument("--out", required=True, help="checkpoint file or directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--perturb", choices=PERTURBATIONS)
    e.add_argument("--phi", type=float, default=0.9)
    e.add_argument("--sample-steps", type=int, default=10)
    e.add_argument("--out", help="report directory (default: <ckpt dir>/eval)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    a.add_argument("--ckpt-dir", required=True)
    a.add_argument("--grid", required=True, help="grid JSON")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render plots for a report.json")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
