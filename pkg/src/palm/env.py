"""Deterministic 2D tabletop simulator of chained pick-and-place subtasks.

The world is kinematic: the gripper translates in the image plane, closing the
gripper within ``grasp_radius`` of a free object attaches it, and opening while
holding deposits the object at the gripper position.  A subtask is complete when
its referent object is released fully inside its target container.

Coordinates are in pixel units with the origin at the top-left corner; pixel
``(u, v)`` covers ``[u, u + 1) x [v, v + 1)`` and ``x`` runs along columns.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 200, 210),
    "orange": (240, 130, 20),
    "purple": (120, 50, 170),
}
OBJECT_SHAPES = ("ball", "block")
CONTAINER_SHAPES = ("bowl", "plate")
BACKGROUND = (40, 40, 40)
GRIPPER_OPEN = (150, 150, 150)
GRIPPER_CLOSED = (250, 250, 250)
GRIPPER_ID = "gripper"


class InvalidConfigError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


class UnknownPerturbationError(ValueError):
    pass


@dataclass
class SceneConfig:
    table_size: int = 64
    num_objects: int | None = None  # defaults to chain_length
    num_containers: int | None = None  # defaults to chain_length
    chain_length: int = 3
    palette: list[str] = field(default_factory=lambda: list(PALETTE))
    seed: int = 0
    max_step: float | None = None  # defaults to table_size / 16
    grasp_radius: float | None = None  # defaults to object size / 2

    def __post_init__(self):
        if self.num_objects is None:
            self.num_objects = self.chain_length
        if self.num_containers is None:
            self.num_containers = self.chain_length
        if self.max_step is None:
            self.max_step = max(1.0, self.table_size / 16)
        if self.grasp_radius is None:
            self.grasp_radius = self.object_size / 2

    @property
    def object_size(self) -> int:
        return max(2, self.table_size // 8)

    @property
    def container_size(self) -> int:
        return max(4, self.table_size // 4)

    @property
    def gripper_size(self) -> int:
        return self.object_size + 4

    @property
    def step_budget(self) -> int:
        return 60 * self.chain_length

    def validate(self) -> None:
        if self.chain_length < 1:
            raise InvalidConfigError(f"chain_length must be >= 1, got {self.chain_length}")
        if self.num_objects < self.chain_length:
            raise InvalidConfigError("num_objects must be >= chain_length")
        if self.num_containers < 1:
            raise InvalidConfigError("num_containers must be >= 1")
        unknown = [c for c in self.palette if c not in PALETTE]
        if unknown:
            raise InvalidConfigError(f"unknown palette colors: {unknown}")
        if self.num_objects > len(self.palette) * len(OBJECT_SHAPES):
            raise InvalidConfigError("palette too small for unique object names")
        if self.num_containers > len(self.palette) * len(CONTAINER_SHAPES):
            raise InvalidConfigError("palette too small for unique container names")
        if self.table_size < 16:
            raise InvalidConfigError("raster too small to place objects")
        need = self.num_containers * (self.container_size + 2) ** 2 + self.num_objects * (
            self.object_size + 2
        ) ** 2
        if need > 0.75 * self.table_size**2:
            raise InvalidConfigError("raster too small to place objects")

    def to_dict(self) -> dict:
        return {
            "table_size": self.table_size,
            "num_objects": self.num_objects,
            "num_containers": self.num_containers,
            "chain_length": self.chain_length,
            "palette": list(self.palette),
            "seed": self.seed,
            "max_step": self.max_step,
            "grasp_radius": self.grasp_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Entity:
    id: str
    color: str
    shape: str
    x: float
    y: float
    held: bool = False

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass
class WorldState:
    objects: list[Entity]
    containers: list[Entity]
    gripper_x: float
    gripper_y: float
    gripper_closed: bool = False
    subtask: int = 0
    lighting_gain: float = 1.0
    lighting_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    distractors: list[str] = field(default_factory=list)
    frame: int = 0

    def held_object(self) -> Entity | None:
        for o in self.objects:
            if o.held:
                return o
        return None

    def object(self, oid: str) -> Entity:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def container(self, cid: str) -> Entity:
        for c in self.containers:
            if c.id == cid:
                return c
        raise KeyError(cid)


@dataclass
class Action:
    delta: np.ndarray  # 6 reals; only the first two are used
    gripper: int  # 1 closes, 0 opens

    @classmethod
    def make(cls, dx: float, dy: float, gripper: int) -> "Action":
        d = np.zeros(6)
        d[0], d[1] = dx, dy
        return cls(d, int(gripper))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.delta, dtype=np.float64), [float(self.gripper)]])


@dataclass
class GroundTruth:
    instance_masks: dict[str, np.ndarray]
    gripper_mask: np.ndarray
    referent_id: str | None
    target_container_id: str | None
    contact_point: tuple[float, float] | None
    placement_points: list[tuple[float, float]]
    motion: np.ndarray  # H x W x 2, displacement of the surface under each pixel since the last frame


@dataclass
class Observation:
    base_view: np.ndarray
    hand_view: np.ndarray
    pose: np.ndarray  # 6-D end-effector pose, unused dimensions exactly 0
    gripper: int
    instruction: str
    ground_truth: GroundTruth

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.pose, [float(self.gripper)]])


def _shape_mask(shape: str, cx: float, cy: float, size: float, us: np.ndarray, vs: np.ndarray):
    du = us + 0.5 - cx
    dv = vs + 0.5 - cy
    half = size / 2
    if shape in ("ball", "bowl"):
        return du * du + dv * dv < half * half + 0.25
    return (np.abs(du) < half) & (np.abs(dv) < half)


def contains(container: Entity, x: float, y: float, cfg: SceneConfig) -> bool:
    """Whether an object centred at (x, y) lies fully inside the container."""
    slack = (cfg.container_size - cfg.object_size) / 2
    dx, dy = x - container.x, y - container.y
    if container.shape == "bowl":
        return dx * dx + dy * dy <= slack * slack + 1e-9
    return abs(dx) <= slack + 1e-9 and abs(dy) <= slack + 1e-9


def build_instruction(pairs: list[tuple[str, str]]) -> str:
    parts = [f"the {o} on the {c}" for o, c in pairs]
    if len(parts) == 1:
        return f"put {parts[0]}"
    return "put " + ", ".join(parts[:-1]) + ", and " + parts[-1]


def vocabulary(palette: list[str] | None = None) -> list[str]:
    """Closed vocabulary of the instruction grammar."""
    palette = list(PALETTE) if palette is None else palette
    words = ["<pad>", "put", "the", "on", "and", ","]
    words += sorted(set(palette))
    words += list(OBJECT_SHAPES) + list(CONTAINER_SHAPES)
    return words


class LongHorizonEnv:
    """One seeded tabletop episode generator; single-threaded."""

    def __init__(self, config: SceneConfig, render: bool = True):
        config.validate()
        self.config = config
        self.render_observations = render
        self.H = config.table_size
        self._vs, self._us = np.mgrid[0 : self.H, 0 : self.H]
        self._schedule: list[tuple[int, str, dict]] = []
        self.done = False
        self.truncated = False
        self._events: list[dict] = []
        self._seed = config.seed
        self.reset(config.seed)

    # ------------------------------------------------------------------ layout
    def _sample_layout(self, rng: np.random.Generator, restarts: int = 100):
        # sequential placement can jam on dense scenes; start over rather than fail
        for _ in range(restarts - 1):
            try:
                return self._try_layout(rng)
            except InvalidConfigError:
                pass
        return self._try_layout(rng)

    def _try_layout(self, rng: np.random.Generator):
        cfg = self.config
        H = self.H
        palette = list(cfg.palette)
        obj_names = [(c, s) for c in palette for s in OBJECT_SHAPES]
        con_names = [(c, s) for c in palette for s in CONTAINER_SHAPES]
        obj_pick = rng.permutation(len(obj_names))[: cfg.num_objects]
        con_pick = rng.permutation(len(con_names))[: cfg.num_containers]
        boxes: list[tuple[float, float, float]] = []  # (x, y, half-extent)

        def place(size: float, tries: int = 2000) -> tuple[float, float]:
            half = size / 2
            for _ in range(tries):
                x = rng.uniform(half + 1, H - half - 1)
                y = rng.uniform(half + 1, H - half - 1)
                if all(max(abs(x - bx), abs(y - by)) >= half + bh + 1 for bx, by, bh in boxes):
                    boxes.append((x, y, half))
                    return float(x), float(y)
            raise InvalidConfigError("raster too small to place objects")

        containers = []
        for i, k in enumerate(con_pick):
            x, y = place(cfg.container_size)
            containers.append(Entity(f"c{i}", con_names[k][0], con_names[k][1], x, y))
        objects = []
        for i, k in enumerate(obj_pick):
            x, y = place(cfg.object_size)
            objects.append(Entity(f"o{i}", obj_names[k][0], obj_names[k][1], x, y))
        gx = float(rng.uniform(cfg.gripper_size, H - cfg.gripper_size))
        gy = float(rng.uniform(cfg.gripper_size, H - cfg.gripper_size))
        return objects, containers, gx, gy

    def reset(self, seed: int | None = None) -> Observation:
        if seed is None:
            seed = self.config.seed
        self._seed = int(seed)
        self.rng = np.random.default_rng(self._seed)
        objects, containers, gx, gy = self._sample_layout(self.rng)
        K = self.config.chain_length
        self.task = [(objects[k].id, containers[k % len(containers)].id) for k in range(K)]
        self.state = WorldState(objects, containers, gx, gy)
        self.instruction = build_instruction(
            [(self.state.object(o).name, self.state.container(c).name) for o, c in self.task]
        )
        self.done = False
        self.truncated = False
        self._schedule = []
        self._events = []
        self._prev_positions = self._positions()
        self._distractor_count = 0
        return self.observe()

    # ---------------------------------------------------------------- queries
    @property
    def referent(self) -> Entity | None:
        if self.state.subtask >= len(self.task):
            return None
        return self.state.object(self.task[self.state.subtask][0])

    @property
    def target_container(self) -> Entity | None:
        if self.state.subtask >= len(self.task):
            return None
        return self.state.container(self.task[self.state.subtask][1])

    def _positions(self) -> dict[str, tuple[float, float]]:
        pos = {o.id: (o.x, o.y) for o in self.state.objects}
        pos.update({c.id: (c.x, c.y) for c in self.state.containers})
        pos[GRIPPER_ID] = (self.state.gripper_x, self.state.gripper_y)
        return pos

    def entity_poses(self) -> dict[str, list[float]]:
        return {k: [float(v[0]), float(v[1])] for k, v in sorted(self._positions().items())}

    # --------------------------------------------------------------- dynamics
    def step(self, action: Action) -> tuple[Observation | None, dict]:
        if self.done:
            raise EpisodeDoneError("step called after episode end")
        cfg = self.config
        st = self.state
        delta = np.asarray(action.delta, dtype=np.float64)
        if delta.shape != (6,):
            raise ValueError("action delta must have 6 components")
        if action.gripper not in (0, 1):
            raise ValueError("gripper command must be 0 or 1")
        dx = float(np.clip(delta[0], -cfg.max_step, cfg.max_step))
        dy = float(np.clip(delta[1], -cfg.max_step, cfg.max_step))
        lo, hi = 0.0, float(self.H) - 1e-6
        st.gripper_x = float(np.clip(st.gripper_x + dx, lo, hi))
        st.gripper_y = float(np.clip(st.gripper_y + dy, lo, hi))
        held = st.held_object()
        if held is not None:
            held.x, held.y = st.gripper_x, st.gripper_y

        completed = False
        if action.gripper == 1 and not st.gripper_closed:
            st.gripper_closed = True
            best, best_d = None, None
            for o in st.objects:
                d = math.hypot(o.x - st.gripper_x, o.y - st.gripper_y)
                if d <= cfg.grasp_radius and (best_d is None or d < best_d):
                    best, best_d = o, d
            if best is not None:
                best.held = True
                best.x, best.y = st.gripper_x, st.gripper_y
        elif action.gripper == 0 and st.gripper_closed:
            st.gripper_closed = False
            if held is not None:
                held.held = False
                ref = self.referent
                tgt = self.target_container
                if ref is not None and held.id == ref.id and contains(tgt, held.x, held.y, cfg):
                    completed = True
                    st.subtask += 1

        st.frame += 1
        self._apply_scheduled()
        if st.subtask >= len(self.task):
            self.done = True
        elif st.frame >= cfg.step_budget:
            self.done = True
            self.truncated = True
        events = {
            "subtask_completed": completed,
            "episode_done": self.done,
            "truncated": self.truncated,
        }
        self._events.append(events)
        obs = self.observe()
        return obs, events

    # ------------------------------------------------------------ perturbation
    def inject_perturbation(self, kind: str, at_step: int | None = None, **params) -> None:
        """Schedule (or, for ``at_step`` equal to the current frame, apply) a perturbation."""
        if kind not in ("relocation", "lighting", "distraction"):
            raise UnknownPerturbationError(kind)
        if at_step is None:
            at_step = self.state.frame
        if at_step < self.state.frame or at_step > self.config.step_budget:
            raise ValueError(f"at_step {at_step} outside the episode budget")
        if at_step == self.state.frame:
            self._apply(kind, params)
        else:
            self._schedule.append((int(at_step), kind, dict(params)))

    def _apply_scheduled(self):
        keep = []
        for at, kind, params in self._schedule:
            if at == self.state.frame:
                self._apply(kind, params)
            else:
                keep.append((at, kind, params))
        self._schedule = keep

    def _apply(self, kind: str, params: dict):
        st = self.state
        rng = self.rng
        cfg = self.config
        if kind == "lighting":
            st.lighting_gain = float(params.get("gain", rng.uniform(0.4, 0.7)))
            tint = params.get("tint")
            if tint is None:
                warm = rng.uniform(-0.25, 0.25)
                tint = (1.0 + warm, 1.0, 1.0 - warm)
            st.lighting_tint = tuple(float(t) for t in tint)
        elif kind == "relocation":
            ref = self.referent
            if ref is None:
                return
            ref.held = False
            ref.x, ref.y = self._free_spot(exclude=ref.id)
        elif kind == "distraction":
            n = int(params.get("n", 3))
            ref = self.referent
            cx, cy = (ref.x, ref.y) if ref is not None else (self.H / 2, self.H / 2)
            names = [(c, s) for c in cfg.palette for s in OBJECT_SHAPES]
            for _ in range(n):
                c, s = names[int(rng.integers(len(names)))]
                if ref is not None and (c, s) == (ref.color, ref.shape):
                    c, s = names[(names.index((c, s)) + 1) % len(names)]
                x, y = self._free_spot(near=(cx, cy), radius=self.H / 4)
                did = f"d{self._distractor_count}"
                self._distractor_count += 1
                st.objects.append(Entity(did, c, s, x, y))
                st.distractors.append(did)

    def _free_spot(self, exclude: str | None = None, near=None, radius=None):
        cfg = self.config
        half = cfg.object_size / 2
        occupied = [(c.x, c.y, cfg.container_size / 2) for c in self.state.containers]
        occupied += [(o.x, o.y, half) for o in self.state.objects if o.id != exclude]
        best, best_gap = None, -np.inf
        for _ in range(500):
            if near is None:
                x = self.rng.uniform(half + 1, self.H - half - 1)
                y = self.rng.uniform(half + 1, self.H - half - 1)
            else:
                x = float(np.clip(near[0] + self.rng.uniform(-radius, radius), half + 1, self.H - half - 1))
                y = float(np.clip(near[1] + self.rng.uniform(-radius, radius), half + 1, self.H - half - 1))
            gap = min(
                (max(abs(x - ox), abs(y - oy)) - half - oh for ox, oy, oh in occupied),
                default=np.inf,
            )
            if gap >= 1:
                return float(x), float(y)
            if gap > best_gap:
                best, best_gap = (float(x), float(y)), gap
        return best

    # -------------------------------------------------------------- rendering
    def observe(self) -> Observation | None:
        positions = self._positions()
        prev = self._prev_positions
        self._prev_positions = positions
        if not self.render_observations:
            return None
        st = self.state
        cfg = self.config
        H = self.H
        us, vs = self._us, self._vs
        img = np.empty((H, H, 3), dtype=np.float64)
        img[:] = BACKGROUND
        label = np.zeros((H, H), dtype=np.int16)  # 0 background, >0 index into ids
        ids: list[str] = []

        def paint(ent_id, shape, x, y, size, color):
            m = _shape_mask(shape, x, y, size, us, vs)
            img[m] = color
            ids.append(ent_id)
            label[m] = len(ids)
            return m

        for c in st.containers:
            col = np.asarray(PALETTE[c.color], dtype=np.float64)
            m = paint(c.id, c.shape, c.x, c.y, cfg.container_size, 0.45 * col)
            inner = _shape_mask(c.shape, c.x, c.y, cfg.container_size - 2, us, vs)
            img[m & ~inner] = col
        gcol = GRIPPER_CLOSED if st.gripper_closed else GRIPPER_OPEN
        paint(GRIPPER_ID, "block", st.gripper_x, st.gripper_y, cfg.gripper_size, gcol)
        held = st.held_object()
        for o in st.objects:
            if o is not held:
                paint(o.id, o.shape, o.x, o.y, cfg.object_size, PALETTE[o.color])
        if held is not None:
            paint(held.id, held.shape, held.x, held.y, cfg.object_size, PALETTE[held.color])

        instance_masks = {}
        for i, eid in enumerate(ids):
            if eid != GRIPPER_ID:
                instance_masks[eid] = label == (i + 1)
        gripper_mask = label == (ids.index(GRIPPER_ID) + 1)

        motion = np.zeros((H, H, 2), dtype=np.float32)
        for i, eid in enumerate(ids):
            if eid in prev:
                d = (positions[eid][0] - prev[eid][0], positions[eid][1] - prev[eid][1])
                if d != (0.0, 0.0):
                    motion[label == (i + 1)] = d

        gain = st.lighting_gain * np.asarray(st.lighting_tint)
        base = np.clip(np.rint(img * gain), 0, 255).astype(np.uint8)
        hand = self._hand_crop(base)
        ref = self.referent
        tgt = self.target_container
        contact = None
        placement = []
        if ref is not None:
            contact = (tgt.x, tgt.y) if ref.held else (ref.x, ref.y)
            placement = [(tgt.x, tgt.y)]
        gt = GroundTruth(
            instance_masks=instance_masks,
            gripper_mask=gripper_mask,
            referent_id=None if ref is None else ref.id,
            target_container_id=None if tgt is None else tgt.id,
            contact_point=contact,
            placement_points=placement,
            motion=motion,
        )
        pose = np.zeros(6)
        pose[0], pose[1] = st.gripper_x, st.gripper_y
        return Observation(base, hand, pose, int(st.gripper_closed), self.instruction, gt)

    def _hand_crop(self, base: np.ndarray) -> np.ndarray:
        H = self.H
        half = H // 4
        cx = int(math.floor(self.state.gripper_x))
        cy = int(math.floor(self.state.gripper_y))
        padded = np.zeros((H + 2 * half, H + 2 * half, 3), dtype=np.uint8)
        padded[half : half + H, half : half + H] = base
        crop = padded[cy : cy + 2 * half, cx : cx + 2 * half]
        return np.repeat(np.repeat(crop, 2, axis=0), 2, axis=1)

    def snapshot(self) -> WorldState:
        return copy.deepcopy(self.state)


def make_env(config: SceneConfig, render: bool = True) -> LongHorizonEnv:
    return LongHorizonEnv(config, render=render)


def reset(env: LongHorizonEnv, seed: int) -> Observation:
    return env.reset(seed)


def step(env: LongHorizonEnv, action: Action):
    return env.step(action)


def inject_perturbation(env: LongHorizonEnv, kind: str, at_step: int | None = None, **params):
    env.inject_perturbation(kind, at_step, **params)


def scripted_expert(env: LongHorizonEnv) -> Action:
    """Proportional controller through approach, grasp, carry and release."""
    st = env.state
    cfg = env.config
    ms = cfg.max_step
    if env.done:
        return Action.make(0.0, 0.0, int(st.gripper_closed))
    ref = env.referent
    held = st.held_object()

    def toward(tx, ty):
        return (
            float(np.clip(tx - st.gripper_x, -ms, ms)),
            float(np.clip(ty - st.gripper_y, -ms, ms)),
        )

    def reached(tx, ty):
        return abs(tx - st.gripper_x) <= ms and abs(ty - st.gripper_y) <= ms

    if held is not None and held.id != ref.id:
        return Action.make(0.0, 0.0, 0)
    if held is not None:
        tgt = env.target_container
        dx, dy = toward(tgt.x, tgt.y)
        return Action.make(dx, dy, 0 if reached(tgt.x, tgt.y) else 1)
    if st.gripper_closed:
        dx, dy = toward(ref.x, ref.y)
        return Action.make(dx, dy, 0)
    dx, dy = toward(ref.x, ref.y)
    return Action.make(dx, dy, 1 if reached(ref.x, ref.y) else 0)
