import numpy as np
import pytest

from palm.env import (
    Action,
    EpisodeDoneError,
    InvalidConfigError,
    LongHorizonEnv,
    SceneConfig,
    UnknownPerturbationError,
    contains,
    inject_perturbation,
    make_env,
    reset,
    scripted_expert,
    step,
)


def run_expert(env, limit=None):
    limit = limit or env.config.step_budget
    n = 0
    while not env.done and n < limit:
        env.step(scripted_expert(env))
        n += 1
    return n


def test_make_env_three_subtasks_deterministic():
    a = make_env(SceneConfig(chain_length=3, seed=7))
    b = make_env(SceneConfig(chain_length=3, seed=7))
    assert a.instruction == b.instruction
    assert a.instruction.startswith("put the ")
    assert a.instruction.count(" on the ") == 3


def test_make_env_six_subtask_chain():
    env = make_env(SceneConfig(chain_length=6, seed=1))
    assert len(env.task) == 6
    assert env.instruction.count(" on the ") == 6


@pytest.mark.parametrize("bad", [dict(chain_length=0), dict(table_size=6)])
def test_invalid_config(bad):
    with pytest.raises(InvalidConfigError):
        make_env(SceneConfig(**bad))


def test_reset_deterministic_and_seed_dependent():
    env = make_env(SceneConfig(seed=0))
    o1 = reset(env, 0)
    o2 = reset(env, 0)
    assert np.array_equal(o1.base_view, o2.base_view)
    assert np.array_equal(o1.hand_view, o2.hand_view)
    assert np.array_equal(o1.state, o2.state)
    p0 = env.entity_poses()
    reset(env, 1)
    assert env.entity_poses() != p0


def test_reset_initial_state():
    env = make_env(SceneConfig(seed=3))
    obs = reset(env, 3)
    assert obs.gripper == 0
    assert not env.state.gripper_closed
    assert all(not o.held for o in env.state.objects)
    assert env.state.subtask == 0
    assert np.all(obs.pose[2:] == 0.0)


def test_instance_masks_disjoint_and_referent_visible():
    env = make_env(SceneConfig(seed=5))
    obs = reset(env, 5)
    masks = list(obs.ground_truth.instance_masks.values()) + [obs.ground_truth.gripper_mask]
    total = np.sum(masks, axis=0)
    assert total.max() <= 1
    assert obs.ground_truth.instance_masks[env.referent.id].any()


def _hold_referent_over(env, container):
    ref = env.referent
    st = env.state
    st.gripper_x, st.gripper_y = ref.x, ref.y
    env.step(Action.make(0.0, 0.0, 1))
    assert ref.held
    st.gripper_x, st.gripper_y = container.x, container.y
    ref.x, ref.y = container.x, container.y


def test_release_over_correct_container_completes_subtask():
    env = make_env(SceneConfig(seed=2))
    _hold_referent_over(env, env.target_container)
    _, ev = env.step(Action.make(0.0, 0.0, 0))
    assert ev["subtask_completed"]
    assert env.state.subtask == 1


def test_release_over_wrong_container_does_not_complete():
    env = make_env(SceneConfig(seed=2))
    wrong = next(c for c in env.state.containers if c.id != env.target_container.id)
    _hold_referent_over(env, wrong)
    _, ev = env.step(Action.make(0.0, 0.0, 0))
    assert not ev["subtask_completed"]
    assert env.state.subtask == 0


def test_zero_action_changes_only_frame_counter():
    env = make_env(SceneConfig(seed=4))
    before = env.snapshot()
    env.step(Action.make(0.0, 0.0, 0))
    after = env.snapshot()
    assert after.frame == before.frame + 1
    after.frame = before.frame
    assert after == before


def test_step_after_done_raises():
    env = make_env(SceneConfig(seed=6, table_size=32))
    run_expert(env)
    assert env.done
    with pytest.raises(EpisodeDoneError):
        step(env, Action.make(0.0, 0.0, 0))


def test_action_clipped_and_padded():
    env = make_env(SceneConfig(seed=0))
    x0 = env.state.gripper_x
    env.step(Action(delta=(100.0, 0, 0, 0, 0, 0), gripper=0))
    assert env.state.gripper_x - x0 <= env.config.max_step + 1e-12
    assert np.all(env.observe().pose[2:] == 0.0)


def test_expert_closes_when_at_grasp_point():
    env = make_env(SceneConfig(seed=8))
    ref = env.referent
    env.state.gripper_x, env.state.gripper_y = ref.x, ref.y
    assert scripted_expert(env).gripper == 1


def test_expert_completes_after_relocation():
    env = make_env(SceneConfig(seed=9))
    inject_perturbation(env, "relocation", at_step=5)
    inject_perturbation(env, "relocation", at_step=20)
    run_expert(env)
    assert env.done and not env.truncated
    assert env.state.subtask == 3


@pytest.mark.parametrize("table_size", [32, 64])
def test_expert_completeness_1000_seeds(table_size):
    env = LongHorizonEnv(SceneConfig(table_size=table_size), render=False)
    for seed in range(1000):
        env.reset(seed)
        run_expert(env)
        assert env.done and not env.truncated, seed
        assert env.state.subtask == env.config.chain_length


def test_lighting_changes_rasters_only():
    env = make_env(SceneConfig(seed=10))
    geom = env.snapshot()
    before = env.observe().base_view.astype(float)
    inject_perturbation(env, "lighting", at_step=env.state.frame, gain=0.5, tint=(1.0, 1.0, 1.0))
    after = env.snapshot()
    assert after.objects == geom.objects and after.containers == geom.containers
    assert (after.gripper_x, after.gripper_y) == (geom.gripper_x, geom.gripper_y)
    img = env.observe().base_view.astype(float)
    assert np.allclose(img, before * 0.5, atol=1.0)


def test_relocation_moves_referent_mask_and_only_it():
    env = make_env(SceneConfig(seed=11))
    obs0 = env.observe()
    ref = env.referent.id
    poses0 = env.entity_poses()
    inject_perturbation(env, "relocation", at_step=env.state.frame)
    obs1 = env.observe()
    poses1 = env.entity_poses()
    changed = [k for k in poses0 if poses0[k] != poses1[k]]
    assert changed == [ref]
    c0 = np.argwhere(obs0.ground_truth.instance_masks[ref]).mean(0)
    c1 = np.argwhere(obs1.ground_truth.instance_masks[ref]).mean(0)
    assert np.linalg.norm(c0 - c1) > 0


def test_distraction_adds_three_masks():
    env = make_env(SceneConfig(seed=12))
    n0 = len(env.observe().ground_truth.instance_masks)
    ref = env.referent.id
    inject_perturbation(env, "distraction", at_step=env.state.frame, n=3)
    gt = env.observe().ground_truth
    assert len(gt.instance_masks) == n0 + 3
    assert gt.referent_id == ref


def test_scheduled_perturbation_applies_at_step():
    env = make_env(SceneConfig(seed=13))
    inject_perturbation(env, "lighting", at_step=2, gain=0.5)
    env.step(Action.make(0, 0, 0))
    assert env.state.lighting_gain == 1.0
    env.step(Action.make(0, 0, 0))
    assert env.state.lighting_gain == 0.5


def test_unknown_perturbation():
    env = make_env(SceneConfig(seed=0))
    with pytest.raises(UnknownPerturbationError):
        inject_perturbation(env, "earthquake", at_step=1)


def test_contains_requires_full_containment():
    cfg = SceneConfig()
    env = make_env(cfg)
    c = env.state.containers[0]
    assert contains(c, c.x, c.y, cfg)
    assert not contains(c, c.x + cfg.container_size, c.y, cfg)
