import numpy as np
import pytest
import torch

from palm.dataset import record_episode
from palm.env import LongHorizonEnv, SceneConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_scene():
    return SceneConfig(table_size=32, chain_length=3, seed=0)


@pytest.fixture(scope="session")
def trajectories(small_scene):
    env = LongHorizonEnv(small_scene)
    return [record_episode(env, s) for s in range(6)]


@pytest.fixture(scope="session")
def traj(trajectories):
    return trajectories[0]


def directional_gradcheck(fn, inputs, probes=50, h=1e-6, seed=0):
    """Compare autograd directional derivatives with central differences.

    ``fn`` maps a list of double tensors to a scalar.  Returns the worst
    relative error over ``probes`` random directions (relative to the larger
    of the two derivative magnitudes, floored at 1e-8).
    """
    gen = torch.Generator().manual_seed(seed)
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(xs, grads)]
    worst = 0.0
    for _ in range(probes):
        dirs = [torch.randn(x.shape, generator=gen, dtype=x.dtype) for x in xs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            plus = float(fn([x + h * d for x, d in zip(xs, dirs)]))
            minus = float(fn([x - h * d for x, d in zip(xs, dirs)]))
        numeric = (plus - minus) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


@pytest.fixture
def gradcheck():
    return directional_gradcheck


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records a pass/fail line and asserts ``ok``."""

    def record(k: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[k] = (bool(ok), detail)
        assert ok, f"criterion {k}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
