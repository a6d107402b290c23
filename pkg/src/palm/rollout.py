"""Closed-loop evaluation with the progress-threshold subtask controller."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
import torch

from .env import Action, LongHorizonEnv, Observation, SceneConfig, scripted_expert
from .model import PalmPolicy
from .diffusion import decode_chunk

EVAL_SEED_BASE = 1_000_000_007 % 100_000_000  # keeps evaluation seeds away from training seeds
PERTURBATIONS = ("relocation", "lighting", "distraction")


class EmptyResultsError(ValueError):
    pass


# ----------------------------------------------------------------- controller


@dataclass
class ControllerState:
    phi: float = 0.9
    num_subtasks: int = 3
    subtask: int = 0
    last_progress: float = 0.0
    latched: bool = False
    rearm: float = 0.5
    switches: list[tuple[int, int, int]] = field(default_factory=list)  # (step, from, to)

    def __post_init__(self):
        if not 0 < self.phi <= 1:
            raise ValueError(f"phi={self.phi} outside (0, 1]")


def progress_controller(p_hat: float, state: ControllerState, step: int | None = None) -> ControllerState:
    """Advance the subtask focus on the first crossing of ``phi``.

    After a switch the controller stays latched until progress falls below
    ``rearm``, so an oscillating signal yields one switch per subtask.  The
    focus never moves past the last subtask.
    """
    state.last_progress = float(p_hat)
    if state.latched:
        if p_hat < state.rearm:
            state.latched = False
        return state
    if p_hat >= state.phi and state.subtask < state.num_subtasks:
        at = len(state.switches) if step is None else step
        state.switches.append((at, state.subtask, state.subtask + 1))
        state.subtask += 1
        state.latched = True
    return state


# -------------------------------------------------------------------- results


def completed_in_a_row(events: list[bool]) -> int:
    """Number of leading successes: ``[True, False, True] -> 1``."""
    n = 0
    for ok in events:
        if not ok:
            break
        n += 1
    return n


@dataclass
class EpisodeResult:
    seed: int
    completed: int
    steps: int
    progress: list[float]
    switches: list[tuple[int, int, int]]
    injections: list[int] = field(default_factory=list)


@dataclass
class EvalReport:
    success_rates: list[float]
    avg_len: float
    completed: list[int]
    num_subtasks: int
    perturbation: str | None = None
    phi: float | None = None
    traces: list[list[float]] = field(default_factory=list)
    injections: list[list[int]] = field(default_factory=list)
    switches: list[list[list[int]]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def avg_len_from_rates(rates) -> float:
    return float(sum(rates))


def success_in_row_metrics(results, num_subtasks: int | None = None) -> EvalReport:
    """SR(k) = fraction of episodes with at least k leading completions; Avg. Len. = sum_k SR(k)."""
    results = list(results)
    if not results:
        raise EmptyResultsError("no episode results")
    counts = [r.completed if isinstance(r, EpisodeResult) else int(r) for r in results]
    K = num_subtasks if num_subtasks is not None else max(max(counts), 1)
    c = np.asarray(counts)
    sr = [float((c >= k).mean()) for k in range(1, K + 1)]
    rep = EvalReport(success_rates=sr, avg_len=float(sum(sr)), completed=counts, num_subtasks=K)
    eps = [r for r in results if isinstance(r, EpisodeResult)]
    if eps:
        rep.traces = [[round(float(p), 6) for p in r.progress] for r in eps]
        rep.injections = [list(r.injections) for r in eps]
        rep.switches = [[list(s) for s in r.switches] for r in eps]
        rep.seeds = [r.seed for r in eps]
    return rep


def report_from_rates(rates) -> EvalReport:
    """Report for published per-depth success rates (no per-episode data)."""
    rates = [float(r) for r in rates]
    return EvalReport(success_rates=rates, avg_len=avg_len_from_rates(rates), completed=[], num_subtasks=len(rates))


# ------------------------------------------------------------------- policies


class Policy(Protocol):
    def start(self, i: int, env: LongHorizonEnv, obs: Observation, seed: int) -> None: ...

    def observe(self, i: int, obs: Observation) -> None: ...

    def plan(self, idx: list[int], envs: list[LongHorizonEnv], stages: list[int]) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """For each env, (actions (m, 7), progress (m,) or None)."""
        ...


class OraclePolicy:
    """Scripted expert with ground-truth progress: 1 on the step that completes a subtask."""

    def start(self, i, env, obs, seed):
        pass

    def observe(self, i, obs):
        pass

    def plan(self, idx, envs, stages):
        out = []
        for env in envs:
            a = scripted_expert(env)
            st = env.state
            held = st.held_object()
            tgt = env.target_container
            finishing = (
                held is not None
                and env.referent is not None
                and held.id == env.referent.id
                and a.gripper == 0
                and abs(tgt.x - st.gripper_x) <= env.config.max_step
                and abs(tgt.y - st.gripper_y) <= env.config.max_step
            )
            out.append((a.as_vector()[None], np.array([1.0 if finishing else 0.0])))
        return out


class LearnedPolicy:
    """Batched chunk planner over a trained :class:`PalmPolicy`.

    Frame tokens are cached per environment so each observation is encoded
    once; sampler noise comes from a per-episode generator so results do not
    depend on which other episodes share the batch.
    """

    def __init__(self, model: PalmPolicy, sample_steps: int | None = None):
        self.model = model.eval()
        self.sample_steps = sample_steps
        self.H = model.cfg.encoder.history
        self.hist: dict[int, deque] = {}
        self.pending: dict[int, list[Observation]] = {}
        self.gens: dict[int, torch.Generator] = {}
        self.ids: dict[int, list[int]] = {}
        self.max_step: dict[int, float] = {}

    def start(self, i, env, obs, seed):
        self.hist[i] = deque(maxlen=self.H)
        self.pending[i] = [obs]
        self.gens[i] = torch.Generator().manual_seed(int(seed))
        self.ids[i] = self.model.encoder.tokenizer.encode(obs.instruction)
        self.max_step[i] = env.config.max_step

    def observe(self, i, obs):
        if obs is not None:
            self.pending[i].append(obs)

    @torch.no_grad()
    def _flush(self, idx):
        frames = [(i, o) for i in idx for o in self.pending[i]]
        if frames:
            base = np.stack([o.base_view for _, o in frames])
            hand = np.stack([o.hand_view for _, o in frames])
            bt, ht = self.model.encode_frames(base, hand)
            for k, (i, o) in enumerate(frames):
                state = torch.tensor(np.append(o.pose, o.gripper), dtype=self.model.dtype)
                if not self.hist[i]:
                    for _ in range(self.H - 1):  # pad the history with the first frame
                        self.hist[i].append((bt[k], ht[k], state))
                self.hist[i].append((bt[k], ht[k], state))
        for i in idx:
            self.pending[i] = []

    @torch.no_grad()
    def plan(self, idx, envs, stages):
        m = self.model
        self._flush(idx)
        bt = torch.stack([torch.stack([h[0] for h in self.hist[i]]) for i in idx])
        ht = torch.stack([torch.stack([h[1] for h in self.hist[i]]) for i in idx])
        st = torch.stack([torch.stack([h[2] for h in self.hist[i]]) for i in idx])
        L = max(len(self.ids[i]) for i in idx)
        ids = torch.zeros(len(idx), L, dtype=torch.long)
        for r, i in enumerate(idx):
            ids[r, : len(self.ids[i])] = torch.tensor(self.ids[i])
        stage = torch.tensor(stages, dtype=torch.long)
        lat, act = m.latents(bt, ht, st, ids, stage)
        cond = m.condition(lat, act)
        n, C = m.cfg.dit.chunk, m.cfg.action_channels
        noise = torch.stack([torch.randn(n, C, generator=self.gens[i], dtype=m.dtype) for i in idx])
        y = m.sample(cond, noise, self.sample_steps)
        out = []
        for r, i in enumerate(idx):
            ch = decode_chunk(y[r : r + 1], self.max_step[i])
            acts = np.zeros((n, 7))
            acts[:, :6] = ch.delta[0].double().numpy()
            acts[:, 6] = ch.gripper[0].numpy()
            prog = None if ch.progress is None else ch.progress[0].double().numpy()
            out.append((acts, prog))
        return out


# ------------------------------------------------------------------- rollouts


def eval_seeds(n: int, offset: int = 0) -> list[int]:
    return [EVAL_SEED_BASE + offset + k for k in range(n)]


def injection_steps(seed: int, count: int, budget: int, lo: int = 4, hi: int | None = None) -> list[int]:
    """``count`` distinct seeded injection steps inside the early part of an episode."""
    rng = np.random.default_rng([seed, 7919])
    hi = min(budget - 1, hi if hi is not None else max(lo + count, budget // 3))
    return sorted(int(s) for s in rng.choice(np.arange(lo, hi + 1), size=count, replace=False))


def run_episodes(
    policy: Policy,
    scene: SceneConfig,
    seeds: list[int],
    phi: float = 0.9,
    max_steps: int | None = None,
    perturbation: str | None = None,
    injections: int = 2,
) -> list[EpisodeResult]:
    """Roll out ``policy`` on every seed in lock-step, re-planning after each executed chunk."""
    if perturbation is not None and perturbation not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {perturbation!r}")
    K = scene.chain_length
    max_steps = scene.step_budget if max_steps is None else max_steps
    envs, ctrls, steps, traces, marks = [], [], [], [], []
    for k, seed in enumerate(seeds):
        env = LongHorizonEnv(SceneConfig.from_dict({**scene.to_dict(), "seed": int(seed)}))
        obs = env.reset(int(seed))
        mk = []
        if perturbation is not None:
            mk = injection_steps(int(seed), injections, scene.step_budget)
            for s in mk:
                env.inject_perturbation(perturbation, at_step=s)
        envs.append(env)
        ctrls.append(ControllerState(phi=phi, num_subtasks=K))
        steps.append(0)
        traces.append([])
        marks.append(mk)
        policy.start(k, env, obs, int(seed))
    while True:
        active = [k for k, e in enumerate(envs) if not e.done and steps[k] < max_steps]
        if not active:
            break
        plans = policy.plan(active, [envs[k] for k in active], [ctrls[k].subtask for k in active])
        for k, (acts, prog) in zip(active, plans):
            env = envs[k]
            for j in range(len(acts)):
                if env.done or steps[k] >= max_steps:
                    break
                a = Action(delta=tuple(float(v) for v in acts[j, :6]), gripper=int(acts[j, 6]))
                obs, _ = env.step(a)
                steps[k] += 1
                if prog is not None:
                    progress_controller(float(prog[j]), ctrls[k], steps[k])
                    traces[k].append(float(prog[j]))
                policy.observe(k, obs)
    return [
        EpisodeResult(
            seed=int(seeds[k]),
            completed=int(envs[k].state.subtask),
            steps=steps[k],
            progress=traces[k],
            switches=list(ctrls[k].switches),
            injections=marks[k],
        )
        for k in range(len(envs))
    ]


def evaluate(
    policy: Policy,
    scene: SceneConfig,
    episodes: int,
    phi: float = 0.9,
    perturbation: str | None = None,
    max_steps: int | None = None,
    seed_offset: int = 0,
) -> EvalReport:
    results = run_episodes(policy, scene, eval_seeds(episodes, seed_offset), phi, max_steps, perturbation)
    rep = success_in_row_metrics(results, scene.chain_length)
    rep.perturbation, rep.phi = perturbation, phi
    return rep


def robustness_run(policy: Policy, scene: SceneConfig, kind: str, episodes: int, phi: float = 0.9) -> EvalReport:
    """Evaluation with two seeded injections of ``kind`` per episode."""
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}")
    return evaluate(policy, scene, episodes, phi, perturbation=kind)


def threshold_sweep(policy: Policy, scene: SceneConfig, phis, episodes: int) -> list[dict]:
    rows = []
    phis = [float(p) for p in phis]
    for p in phis:
        if not 0 < p <= 1:
            raise ValueError(f"phi={p} outside (0, 1]")
    for p in phis:
        rep = evaluate(policy, scene, episodes, p)
        rows.append({"phi": p, "success_rates": rep.success_rates, "avg_len": rep.avg_len})
    return rows


# ------------------------------------------------------------ controller probe


def controller_probe(
    phi: float, sigma: float = 0.05, subtasks: int = 1000, length: int = 20, dwell: int = 2, seed: int = 0
) -> dict:
    """Switch statistics for noisy oracle progress on synthetic subtasks.

    Ground-truth progress rises linearly from 0 to 1 over ``length`` steps (the
    subtask completes on the last of them) and then holds at 1 for ``dwell``
    steps before the episode would time out.  The controller sees the truth
    plus Gaussian noise, clipped to [0, 1].  A premature switch happens before
    completion; a stagnation is a subtask with no switch at all.
    """
    if not 0 < phi <= 1:
        raise ValueError(f"phi={phi} outside (0, 1]")
    rng = np.random.default_rng(seed)
    truth = np.concatenate([np.linspace(0.0, 1.0, length), np.ones(dwell)])
    noisy = np.clip(truth[None] + rng.normal(0.0, sigma, size=(subtasks, len(truth))), 0.0, 1.0)
    premature = stagnant = 0
    for row in noisy:
        st = ControllerState(phi=phi, num_subtasks=1)
        switched_at = None
        for t, v in enumerate(row):
            progress_controller(float(v), st, t)
            if st.switches:
                switched_at = t
                break
        if switched_at is None:
            stagnant += 1
        elif switched_at < length - 1:
            premature += 1
    return {"phi": phi, "premature_rate": premature / subtasks, "stagnation_rate": stagnant / subtasks}
