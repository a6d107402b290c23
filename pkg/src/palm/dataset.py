"""Expert demonstration generation and the on-disk episode format.

Layout of a dataset root::

    manifest.json
    episode_00000/
        meta.json          seed, K, instruction, subtask boundaries, per-step events
        steps.jsonl        one record per step
        base_00000.png     base-view raster per frame
        hand_00000.png     hand-view raster per frame
        mask_<id>_00000.png  single-channel instance masks per frame
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .env import GRIPPER_ID, LongHorizonEnv, Observation, SceneConfig, scripted_expert

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ExpertTimeoutError(RuntimeError):
    pass


class CorruptEpisodeError(RuntimeError):
    pass


@dataclass
class TrajectoryRecord:
    """One expert episode held in memory.

    ``len(actions) == L`` and there are ``L + 1`` frames: frame ``t`` is the
    observation the action at step ``t`` was chosen from.
    """

    seed: int
    chain_length: int
    instruction: str
    base: np.ndarray  # (L+1, H, W, 3) uint8
    hand: np.ndarray  # (L+1, H, W, 3) uint8
    poses: np.ndarray  # (L+1, 6)
    grippers: np.ndarray  # (L+1,) int
    actions: np.ndarray  # (L, 7): 6-D delta + gripper command
    subtask: np.ndarray  # (L+1,) active subtask index at each frame
    boundaries: list[int]  # step index of each subtask completion
    referent: list[str | None]  # per frame
    target_container: list[str | None]  # per frame
    contact: list[tuple[float, float] | None]  # per frame
    placement: list[list[tuple[float, float]]]  # per frame
    entity_poses: list[dict[str, list[float]]]  # per frame
    masks: dict[str, np.ndarray]  # id -> (L+1, H, W) bool; includes the gripper
    events: list[dict] = field(default_factory=list)
    max_step: float = 1.0

    @property
    def num_frames(self) -> int:
        return len(self.base)

    @property
    def num_steps(self) -> int:
        return len(self.actions)

    @property
    def raster_size(self) -> int:
        return self.base.shape[1]

    def label_map(self, t: int) -> tuple[np.ndarray, list[str]]:
        """Entity label image at frame t (0 = background, i+1 = ids[i])."""
        ids = sorted(self.masks)
        lab = np.zeros(self.base.shape[1:3], dtype=np.int16)
        for i, k in enumerate(ids):
            lab[self.masks[k][t]] = i + 1
        return lab, ids


def record_episode(env: LongHorizonEnv, seed: int) -> TrajectoryRecord:
    """Roll the scripted expert from ``reset(seed)``; raise on budget overrun."""
    traj = record_actions(env, seed, None)
    if env.truncated:
        raise ExpertTimeoutError(f"seed {seed} exceeded {env.config.step_budget} steps")
    return traj


def record_actions(env: LongHorizonEnv, seed: int, actions=None) -> TrajectoryRecord:
    """Record an episode driven by ``actions`` (an iterable of Action) or by the expert."""
    obs = env.reset(seed)
    frames: list[Observation] = [obs]
    poses = [env.entity_poses()]
    subtasks = [env.state.subtask]
    acts, events, boundaries = [], [], []
    it = iter(actions) if actions is not None else None
    while not env.done:
        if it is None:
            a = scripted_expert(env)
        else:
            a = next(it, None)
            if a is None:
                break
        obs, ev = env.step(a)
        acts.append(a.as_vector())
        events.append(ev)
        if ev["subtask_completed"]:
            boundaries.append(len(acts) - 1)
        frames.append(obs)
        poses.append(env.entity_poses())
        subtasks.append(env.state.subtask)
    return _from_observations(seed, env, frames, poses, subtasks, acts, events, boundaries)


def _from_observations(seed, env, frames, poses, subtasks, actions, events, boundaries):
    ids = set()
    for f in frames:
        ids.update(f.ground_truth.instance_masks)
    H = env.config.table_size
    masks = {}
    for k in sorted(ids):
        m = np.zeros((len(frames), H, H), dtype=bool)
        for t, f in enumerate(frames):
            if k in f.ground_truth.instance_masks:
                m[t] = f.ground_truth.instance_masks[k]
        masks[k] = m
    masks[GRIPPER_ID] = np.stack([f.ground_truth.gripper_mask for f in frames])
    return TrajectoryRecord(
        seed=int(seed),
        chain_length=env.config.chain_length,
        instruction=env.instruction,
        base=np.stack([f.base_view for f in frames]),
        hand=np.stack([f.hand_view for f in frames]),
        poses=np.stack([f.pose for f in frames]),
        grippers=np.array([f.gripper for f in frames], dtype=np.int64),
        actions=np.asarray(actions, dtype=np.float64).reshape(-1, 7),
        subtask=np.asarray(subtasks, dtype=np.int64),
        boundaries=list(boundaries),
        referent=[f.ground_truth.referent_id for f in frames],
        target_container=[f.ground_truth.target_container_id for f in frames],
        contact=[f.ground_truth.contact_point for f in frames],
        placement=[f.ground_truth.placement_points for f in frames],
        entity_poses=poses,
        masks=masks,
        events=events,
        max_step=float(env.config.max_step),
    )


def _png(path: Path, arr: np.ndarray) -> None:
    # Pillow writes no timestamps, so identical arrays give identical bytes.
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_episode(traj: TrajectoryRecord, path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": traj.seed,
        "K": traj.chain_length,
        "instruction": traj.instruction,
        "boundaries": traj.boundaries,
        "events": traj.events,
        "num_frames": traj.num_frames,
        "mask_ids": sorted(traj.masks),
        "max_step": traj.max_step,
    }
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    lines = []
    for t in range(traj.num_frames):
        rec = {
            "t": t,
            "state": [float(v) for v in traj.poses[t]] + [int(traj.grippers[t])],
            "action": None if t >= traj.num_steps else [float(v) for v in traj.actions[t]],
            "subtask": int(traj.subtask[t]),
            "contact_point": None if traj.contact[t] is None else list(traj.contact[t]),
            "placement_points": [list(p) for p in traj.placement[t]],
            "referent_id": traj.referent[t],
            "target_container_id": traj.target_container[t],
            "entity_poses": traj.entity_poses[t],
        }
        lines.append(_json_dumps(rec))
    (path / "steps.jsonl").write_text("\n".join(lines) + "\n")
    for t in range(traj.num_frames):
        _png(path / f"base_{t:05d}.png", traj.base[t])
        _png(path / f"hand_{t:05d}.png", traj.hand[t])
        for k, m in traj.masks.items():
            _png(path / f"mask_{k}_{t:05d}.png", m[t].astype(np.uint8) * 255)


def load_episode(path: str | os.PathLike) -> TrajectoryRecord:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        steps = [json.loads(line) for line in (path / "steps.jsonl").read_text().splitlines() if line]
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptEpisodeError(f"{path}: {e}") from e
    F = meta["num_frames"]
    if len(steps) != F:
        raise CorruptEpisodeError(f"{path}: expected {F} step records, found {len(steps)}")

    def img(name):
        return np.asarray(Image.open(path / name))

    try:
        base = np.stack([img(f"base_{t:05d}.png") for t in range(F)])
        hand = np.stack([img(f"hand_{t:05d}.png") for t in range(F)])
        masks = {
            k: np.stack([img(f"mask_{k}_{t:05d}.png") > 127 for t in range(F)]) for k in meta["mask_ids"]
        }
    except OSError as e:
        raise CorruptEpisodeError(f"{path}: {e}") from e
    states = np.array([s["state"] for s in steps], dtype=np.float64)
    return TrajectoryRecord(
        seed=meta["seed"],
        chain_length=meta["K"],
        instruction=meta["instruction"],
        base=base,
        hand=hand,
        poses=states[:, :6],
        grippers=states[:, 6].astype(np.int64),
        actions=np.array([s["action"] for s in steps[:-1]], dtype=np.float64).reshape(-1, 7),
        subtask=np.array([s["subtask"] for s in steps], dtype=np.int64),
        boundaries=list(meta["boundaries"]),
        referent=[s["referent_id"] for s in steps],
        target_container=[s["target_container_id"] for s in steps],
        contact=[None if s["contact_point"] is None else tuple(s["contact_point"]) for s in steps],
        placement=[[tuple(p) for p in s["placement_points"]] for s in steps],
        entity_poses=[s["entity_poses"] for s in steps],
        masks=masks,
        events=meta["events"],
        max_step=meta.get("max_step", 1.0),
    )


@dataclass
class DatasetManifest:
    scene: dict
    episodes: list[dict]  # {"path", "seed", "K", "num_steps"}
    discarded: list[int]
    raster_size: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "scene": self.scene,
                "episodes": self.episodes,
                "discarded_seeds": self.discarded,
                "raster_size": self.raster_size,
            },
            sort_keys=True,
            indent=1,
        )

    @classmethod
    def load(cls, root: str | os.PathLike) -> "DatasetManifest":
        d = json.loads((Path(root) / "manifest.json").read_text())
        return cls(d["scene"], d["episodes"], d["discarded_seeds"], d["raster_size"])


def generate_dataset(config: SceneConfig, n_episodes: int, out_path) -> DatasetManifest:
    """Run the expert for ``n_episodes`` seeds derived from ``config.seed``.

    Episodes that exceed the step budget are discarded and logged; the seed
    sequence continues so the manifest still lists ``n_episodes`` episodes.
    """
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    env = LongHorizonEnv(config)
    episodes, discarded = [], []
    seed = int(config.seed) * 100_003
    tries = 0
    while len(episodes) < n_episodes:
        tries += 1
        if tries > 10 * n_episodes + 100:
            raise ExpertTimeoutError("too many discarded episodes")
        try:
            traj = record_episode(env, seed)
        except ExpertTimeoutError as e:
            log.warning("discarding episode: %s", e)
            discarded.append(seed)
            seed += 1
            continue
        name = f"episode_{len(episodes):05d}"
        save_episode(traj, root / name)
        episodes.append(
            {"path": name, "seed": seed, "K": traj.chain_length, "num_steps": traj.num_steps}
        )
        seed += 1
    manifest = DatasetManifest(config.to_dict(), episodes, discarded, config.table_size)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_dataset(root) -> list[TrajectoryRecord]:
    m = DatasetManifest.load(root)
    return [load_episode(Path(root) / e["path"]) for e in m.episodes]
