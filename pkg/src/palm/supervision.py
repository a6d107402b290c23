"""Per-sample affordance targets and progress labels built from simulator ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np

from .dataset import CorruptEpisodeError, TrajectoryRecord


class OutOfRangeError(IndexError):
    pass


class MissingBoundariesError(ValueError):
    pass


@dataclass
class SupervisionConfig:
    n: int = 3  # future offset == action chunk length
    delta: int = 6  # tracking history offset
    grid: int = 16  # N x N query grid
    tau: float = 2.0  # cumulative displacement threshold (px)
    sigma: float = 2.0  # heatmap std (px)
    num_candidates: int = 8  # M predicted placement candidates
    num_points: int = 4  # C sampled placement targets
    eps: float = 1e-8
    disk_radius: float = 2.0
    history: int = 7
    stage_phi: float = 0.9

    def __post_init__(self):
        if self.n < 1 or self.delta < 1 or self.grid < 2 or self.num_candidates < 1:
            raise ValueError("n, delta >= 1, grid >= 2, num_candidates >= 1 required")
        if not (self.tau > 0 and self.sigma > 0 and self.eps > 0):
            raise ValueError("tau, sigma and eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AffordanceTargets:
    global_mask: np.ndarray  # (H, W) bool
    object_feature: np.ndarray | None
    local_heatmap: np.ndarray  # (H, W) float, peak 1 or all zero
    spatial_points: np.ndarray  # (C, 2) in [0, 1]^2, possibly empty
    dynamic_mask: np.ndarray  # (H, W) bool
    masked_future_pixels: np.ndarray  # (H, W, 3) float in [0, 1], zero off the mask
    progress: float


@dataclass
class TrainingSample:
    base: np.ndarray  # (history, H, W, 3) uint8
    hand: np.ndarray
    states: np.ndarray  # (history, 7)
    instruction: str
    stage: int
    targets: AffordanceTargets
    actions: np.ndarray  # (n, 7)
    progress: np.ndarray  # (n,)


def _check_future(traj: TrajectoryRecord, t: int, n: int) -> int:
    if t < 0 or t + n > traj.num_frames - 1:
        raise OutOfRangeError(f"t={t}, n={n} outside episode with {traj.num_frames} frames")
    return t + n


def global_mask_target(
    traj: TrajectoryRecord,
    t: int,
    n: int,
    encoder: Callable[[np.ndarray], np.ndarray] | None = None,
):
    """Referent instance mask at ``t + n`` and its masked-pooled encoder feature.

    ``encoder`` maps an (H, W, 3) uint8 raster to a (gh, gw, d) patch feature
    grid.  Patches overlapping the mask are averaged; an empty mask gives a
    zero feature.
    """
    f = _check_future(traj, t, n)
    ref = traj.referent[t]
    H, W = traj.base.shape[1:3]
    if ref is None or ref not in traj.masks:
        mask = np.zeros((H, W), dtype=bool)
    else:
        mask = traj.masks[ref][f].copy()
    if encoder is None:
        return mask, None
    feats = np.asarray(encoder(traj.base[f]))
    gh, gw, d = feats.shape
    ph, pw = H // gh, W // gw
    overlap = mask.reshape(gh, ph, gw, pw).any(axis=(1, 3))
    if not overlap.any():
        return mask, np.zeros(d, dtype=feats.dtype)
    return mask, feats[overlap].mean(axis=0)


def gaussian_heatmap(point, H: int, W: int, sigma: float) -> np.ndarray:
    """Gaussian centred on the pixel containing ``point``; zeros if none/out of view."""
    if point is None:
        return np.zeros((H, W))
    x, y = point
    if not (0 <= x < W and 0 <= y < H):
        return np.zeros((H, W))
    u0, v0 = int(np.floor(x)), int(np.floor(y))
    vs, us = np.mgrid[0:H, 0:W]
    return np.exp(-((us - u0) ** 2 + (vs - v0) ** 2) / (2.0 * sigma**2))


def local_heatmap_target(traj: TrajectoryRecord, t: int, n: int, sigma: float) -> np.ndarray:
    f = _check_future(traj, t, n)
    H, W = traj.base.shape[1:3]
    return gaussian_heatmap(traj.contact[f], H, W, sigma)


def normalize_map(m, eps: float = 1e-8):
    """l1-normalise a nonnegative map: ``m / (sum(m) + eps)``.

    Works on numpy arrays and torch tensors; for torch the sum runs over the
    last two dimensions so batches normalise per sample.
    """
    if hasattr(m, "detach"):
        if bool((m < 0).any()):
            raise ValueError("normalize_map requires nonnegative entries")
        return m / (m.sum(dim=(-2, -1), keepdim=True) + eps)
    m = np.asarray(m, dtype=np.float64)
    if (m < 0).any():
        raise ValueError("normalize_map requires nonnegative entries")
    return m / (m.sum() + eps)


def spatial_points_target(
    traj: TrajectoryRecord, t: int, n: int, num_points: int = 4, seed: int | None = None
) -> np.ndarray:
    """``num_points`` uniform samples inside the target container's mask at ``t + n``.

    Points are pixel centres normalised by the raster size.  Returns a (0, 2)
    array when the subtask has no placement target or the container is hidden.
    """
    f = _check_future(traj, t, n)
    cid = traj.target_container[t]
    if cid is None or cid not in traj.masks:
        return np.zeros((0, 2))
    vs, us = np.nonzero(traj.masks[cid][f])
    if len(us) == 0:
        return np.zeros((0, 2))
    if seed is None:
        seed = traj.seed * 10_007 + t
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(us), size=num_points)
    H, W = traj.base.shape[1:3]
    return np.stack([(us[pick] + 0.5) / W, (vs[pick] + 0.5) / H], axis=1)


class Tracker(Protocol):
    def track(self, traj: TrajectoryRecord, points: np.ndarray, t0: int, t1: int) -> np.ndarray:
        """Return positions of shape (t1 - t0 + 1, P, 2) for query points at frame t0."""


class GroundTruthTracker:
    """Follows each query point with the rigid motion of the entity under it at ``t0``.

    Points on the background stay put.  Teleports (relocation) count as a
    single jump.
    """

    def track(self, traj, points, t0, t1):
        lab, ids = traj.label_map(t0)
        H, W = lab.shape
        u = np.clip(np.floor(points[:, 0]).astype(int), 0, W - 1)
        v = np.clip(np.floor(points[:, 1]).astype(int), 0, H - 1)
        owner = lab[v, u]
        out = np.repeat(points[None].astype(np.float64), t1 - t0 + 1, axis=0)
        for k in np.unique(owner):
            if k == 0:
                continue
            eid = ids[k - 1]
            sel = owner == k
            start = traj.entity_poses[t0].get(eid)
            if start is None:
                continue
            for s in range(t0 + 1, t1 + 1):
                cur = traj.entity_poses[s].get(eid, start)
                out[s - t0, sel, 0] = points[sel, 0] + (cur[0] - start[0])
                out[s - t0, sel, 1] = points[sel, 1] + (cur[1] - start[1])
        return out


def query_grid(H: int, W: int, N: int) -> np.ndarray:
    """N x N grid of query points at pixel centres, in continuous pixel coordinates."""
    us = np.floor((np.arange(N) + 0.5) * W / N) + 0.5
    vs = np.floor((np.arange(N) + 0.5) * H / N) + 0.5
    gu, gv = np.meshgrid(us, vs)
    return np.stack([gu.ravel(), gv.ravel()], axis=1)


def rasterize_disks(points: np.ndarray, H: int, W: int, radius: float) -> np.ndarray:
    mask = np.zeros((H, W), dtype=bool)
    if len(points) == 0:
        return mask
    r = int(np.ceil(radius)) + 1
    offsets = [(du, dv) for du in range(-r, r + 1) for dv in range(-r, r + 1)]
    base_u = np.floor(points[:, 0]).astype(int)
    base_v = np.floor(points[:, 1]).astype(int)
    for du, dv in offsets:
        u = base_u + du
        v = base_v + dv
        d2 = (u + 0.5 - points[:, 0]) ** 2 + (v + 0.5 - points[:, 1]) ** 2
        ok = (d2 <= radius * radius) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        mask[v[ok], u[ok]] = True
    return mask


def dynamic_region_target(
    traj: TrajectoryRecord,
    t: int,
    delta: int,
    n: int,
    N: int,
    tau: float,
    radius: float = 2.0,
    tracker: Tracker | None = None,
    clamp_start: bool = False,
):
    """Rasterised positions at ``t + n`` of grid points whose path length exceeds ``tau``.

    Returns ``(mask, masked_future_pixels)`` with the future base view scaled
    to [0, 1] and zeroed off the mask.
    """
    f = _check_future(traj, t, n)
    t0 = t - delta
    if t0 < 0:
        if not clamp_start:
            raise OutOfRangeError(f"t - delta = {t0} < 0")
        t0 = 0
    tracker = tracker or GroundTruthTracker()
    H, W = traj.base.shape[1:3]
    pts = query_grid(H, W, N)
    paths = tracker.track(traj, pts, t0, f)
    length = np.linalg.norm(np.diff(paths, axis=0), axis=-1).sum(axis=0)
    keep = length > tau
    mask = rasterize_disks(paths[-1, keep], H, W, radius)
    pixels = traj.base[f].astype(np.float64) / 255.0 * mask[..., None]
    return mask, pixels


def moved_pixel_mask(traj: TrajectoryRecord, t0: int, t1: int, tau: float) -> np.ndarray:
    """Visible pixels at ``t1`` of entities whose centre path over [t0, t1] exceeds ``tau``."""
    H, W = traj.base.shape[1:3]
    out = np.zeros((H, W), dtype=bool)
    for eid, m in traj.masks.items():
        if eid not in traj.entity_poses[t0] or not m[t0].any() or not m[t1].any():
            continue
        path = np.array([traj.entity_poses[s].get(eid, traj.entity_poses[t0][eid]) for s in range(t0, t1 + 1)])
        if np.linalg.norm(np.diff(path, axis=0), axis=-1).sum() > tau:
            out |= m[t1]
    return out


def progress_labels(traj: TrajectoryRecord) -> np.ndarray:
    """Linear within-subtask progress for each step: 0 at a subtask's first step, 1 at its last."""
    b = list(traj.boundaries)
    L = traj.num_steps
    if not b or b[-1] != L - 1 or any(x >= y for x, y in zip(b, b[1:])):
        raise MissingBoundariesError(f"boundaries {b} do not cover {L} steps")
    p = np.empty(L)
    start = 0
    for end in b:
        if end == start:
            p[start] = 1.0
        else:
            p[start : end + 1] = (np.arange(start, end + 1) - start) / (end - start)
        start = end + 1
    return p


def stage_labels(traj: TrajectoryRecord, phi: float = 0.9) -> np.ndarray:
    """Controller stage seen by the policy at each step.

    The stage advances one step early, as soon as the progress label reaches
    ``phi``, matching what a progress-threshold controller would feed back.
    """
    p = progress_labels(traj)
    return traj.subtask[: traj.num_steps] + (p >= phi - 1e-12).astype(np.int64)


def history_indices(t: int, history: int = 7) -> np.ndarray:
    return np.clip(np.arange(t - history + 1, t + 1), 0, None)


def build_sample(
    traj: TrajectoryRecord,
    t: int,
    cfg: SupervisionConfig,
    encoder=None,
    tracker: Tracker | None = None,
    progress: np.ndarray | None = None,
    stages: np.ndarray | None = None,
) -> TrainingSample:
    if traj.num_steps != traj.num_frames - 1 or traj.actions.shape[1] != 7:
        raise CorruptEpisodeError("frame/action counts inconsistent")
    if not 0 <= t <= traj.num_frames - 1 - cfg.n:
        raise OutOfRangeError(f"t={t} outside [0, {traj.num_frames - 1 - cfg.n}]")
    progress = progress_labels(traj) if progress is None else progress
    stages = stage_labels(traj, cfg.stage_phi) if stages is None else stages
    hist = history_indices(t, cfg.history)
    gmask, feat = global_mask_target(traj, t, cfg.n, encoder)
    dmask, dpix = dynamic_region_target(
        traj, t, cfg.delta, cfg.n, cfg.grid, cfg.tau, cfg.disk_radius, tracker, clamp_start=True
    )
    targets = AffordanceTargets(
        global_mask=gmask,
        object_feature=feat,
        local_heatmap=local_heatmap_target(traj, t, cfg.n, cfg.sigma),
        spatial_points=spatial_points_target(traj, t, cfg.n, cfg.num_points),
        dynamic_mask=dmask,
        masked_future_pixels=dpix,
        progress=float(progress[t]),
    )
    states = np.concatenate([traj.poses[hist], traj.grippers[hist, None].astype(np.float64)], axis=1)
    return TrainingSample(
        base=traj.base[hist],
        hand=traj.hand[hist],
        states=states,
        instruction=traj.instruction,
        stage=int(stages[t]),
        targets=targets,
        actions=traj.actions[t : t + cfg.n].copy(),
        progress=progress[t : t + cfg.n].copy(),
    )


def contact_pixel(point, H: int, W: int) -> tuple[int, int]:
    """Pixel index (u, v) holding the contact point, or (-1, -1) if absent."""
    if point is None or not (0 <= point[0] < W and 0 <= point[1] < H):
        return -1, -1
    return int(np.floor(point[0])), int(np.floor(point[1]))


__all__ = [
    "AffordanceTargets",
    "GroundTruthTracker",
    "MissingBoundariesError",
    "OutOfRangeError",
    "SupervisionConfig",
    "TrainingSample",
    "build_sample",
    "contact_pixel",
    "dynamic_region_target",
    "gaussian_heatmap",
    "global_mask_target",
    "local_heatmap_target",
    "moved_pixel_mask",
    "normalize_map",
    "progress_labels",
    "spatial_points_target",
    "stage_labels",
]
