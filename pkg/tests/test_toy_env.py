import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpolicy import toy_env as E
from hybridpolicy.nn_core import make_rng


def test_reset_is_deterministic():
    a, b = E.reset(7, 4, 1), E.reset(7, 4, 1)
    np.testing.assert_array_equal(a.agent_pos, b.agent_pos)
    np.testing.assert_array_equal(a.targets, b.targets)


def test_reset_rejects_bad_task_and_too_few_targets():
    with pytest.raises(ValueError):
        E.reset(0, 4, 4)
    with pytest.raises(ValueError):
        E.reset(0, 1, 0)


def test_infeasible_placement_raises():
    with pytest.raises(E.GenerationError):
        E.reset(0, 40, 0)


@pytest.mark.parametrize("G", [2, 4])
def test_target_separation_over_1000_seeds(G):
    for seed in range(1000):
        s = E.reset(seed, G, 0)
        d = np.linalg.norm(s.targets[:, None] - s.targets[None], axis=-1)
        assert d[np.triu_indices(G, 1)].min() >= E.MIN_SEPARATION
        assert np.all(np.abs(s.targets) <= 1.0)
        assert np.all(np.abs(s.agent_pos) <= E.START_JITTER)


def test_zero_action_keeps_position():
    s = E.reset(3, 4, 0)
    nxt, done, success = E.step(s, np.zeros(2))
    np.testing.assert_array_equal(nxt.agent_pos, s.agent_pos)
    assert nxt.step_count == 1 and not done and not success


def test_step_clips_at_boundary():
    s = E.reset(3, 4, 0)
    s = E.EnvState(np.array([0.99, 0.0]), s.targets, 0)
    nxt, _, _ = E.step(s, np.array([1.0, 0.0]))
    assert nxt.agent_pos[0] == 1.0


def test_step_scales_and_clips_action():
    s = E.EnvState(np.zeros(2), np.array([[0.5, 0.5], [-0.5, -0.5]]), 0)
    nxt, _, _ = E.step(s, np.array([0.4, 3.0]))
    np.testing.assert_allclose(nxt.agent_pos, [0.02, 0.05])


def test_success_and_horizon_cap():
    targets = np.array([[0.5, 0.5], [-0.5, -0.5]])
    near = E.EnvState(np.array([0.5, 0.45]), targets, 0)
    _, done, success = E.step(near, np.array([0.0, 0.9]))
    assert done and success
    late = E.EnvState(np.zeros(2), targets, 0, E.HORIZON - 1)
    _, done, success = E.step(late, np.zeros(2))
    assert done and not success


def test_expert_at_target_is_small():
    s = E.reset(1, 4, 2)
    s = E.EnvState(s.target.copy(), s.targets, 2)
    a = E.expert_action(s, make_rng(0))
    assert np.max(np.abs(a)) <= E.EXPERT_NOISE


def test_expert_far_left_saturates_positive():
    targets = np.array([[0.8, 0.0], [-0.8, 0.5]])
    a = E.expert_action(E.EnvState(np.array([-0.8, 0.0]), targets, 0), make_rng(0))
    assert a[0] > 0.97


def test_expert_succeeds_over_1000_seeds():
    rng = make_rng(0)
    for seed in range(1000):
        traj = E.rollout_expert(E.reset(seed, 4, seed % 4), rng)
        assert traj.success and len(traj) <= E.HORIZON


def test_trajectory_actions_are_normalized_and_consistent():
    traj = E.rollout_expert(E.reset(5, 4, 3), make_rng(1))
    assert np.all(np.abs(traj.actions) <= 1.0)
    assert traj.positions.shape == (len(traj) + 1, 2)
    for t in range(len(traj)):
        nxt, _, _ = E.step(traj.state(t), traj.actions[t])
        np.testing.assert_array_equal(nxt.agent_pos, traj.positions[t + 1])


def test_refiner_channel_has_no_task_identity():
    states = [E.reset(11, 4, k) for k in range(4)]
    obs = [E.observe(s, "refiner") for s in states]
    for o in obs[1:]:
        np.testing.assert_array_equal(o, obs[0])
    assert obs[0].shape == (E.obs_size("refiner", 2, 4),)
    p = E.observe(states[2], "planner")
    assert p.shape == (E.obs_size("planner", 2, 4),)
    np.testing.assert_array_equal(p[-4:], [0, 0, 1, 0])


def test_observe_is_deterministic_and_rejects_unknown_channel():
    s = E.reset(2, 4, 0)
    for ch in E.CHANNELS:
        np.testing.assert_array_equal(E.observe(s, ch), E.observe(s, ch))
    with pytest.raises(ValueError):
        E.observe(s, "camera")


CELL = 2.0 / E.OBS_GRID


@settings(max_examples=200, deadline=None)
@given(st.integers(0, E.OBS_GRID - 1), st.integers(0, E.OBS_GRID - 1),
       st.floats(-0.49, 0.49), st.floats(-0.49, 0.49))
def test_planner_channel_ignores_subcell_moves(i, j, du, dv):
    center = -1.0 + CELL * (np.array([i, j]) + 0.5)
    targets = np.array([[0.5, 0.5], [-0.5, -0.5]])
    base = E.observe(E.EnvState(center, targets, 0), "planner")
    moved = E.observe(E.EnvState(center + CELL * np.array([du, dv]), targets, 0), "planner")
    np.testing.assert_array_equal(base, moved)


def test_nearest_target_policy_hits_one_in_g_on_symmetric_layouts():
    # without the task id, any refiner-only rule picks the same target for every task
    G, n = 4, 400
    hits = 0
    for i in range(n):
        s = E.reset(i, G, i % G, layout="symmetric")
        obs = E.observe(s, "refiner")
        targets = obs[2:].reshape(G, 2)
        guess = int(np.argmin(np.linalg.norm(targets - obs[:2], axis=1)))
        hits += guess == s.task_id
    assert abs(hits / n - 1 / G) < 0.05


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_dynamics_are_pure(seed, action):
    s = E.reset(seed, 3, seed % 3)
    a, _, _ = E.step(s, action)
    b, _, _ = E.step(s, action)
    np.testing.assert_array_equal(a.agent_pos, b.agent_pos)
    assert np.all(np.abs(a.agent_pos) <= 1.0)
