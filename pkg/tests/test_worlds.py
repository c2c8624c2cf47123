import numpy as np
import pytest

from vsteer.worlds import (
    TOGGLE,
    GridPickPlace,
    GridState,
    PointMassPlace,
    PointState,
    ScriptedGridPolicy,
    ScriptedPointPolicy,
    _segments_cross,
    generate_dataset,
    mixed_flawed_policy,
    rollout_episode,
)


@pytest.fixture
def env():
    return GridPickPlace()


def test_reset_deterministic(env):
    a = env.reset(0, np.random.default_rng(5))
    b = env.reset(0, np.random.default_rng(5))
    assert a == b


def test_reset_unknown_task(env):
    with pytest.raises(ValueError):
        env.reset(9, np.random.default_rng(0))


def test_object_never_spawns_in_container(env):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = env.reset(0, rng)
        assert (s.obj_r, s.obj_c) not in env.containers
        assert not s.holding


def test_spawn_coverage(env):
    rng = np.random.default_rng(1)
    cells = {(env.reset(0, rng).obj_r, env.reset(0, rng).obj_c) for _ in range(10_000)}
    legal = env.n * env.n - len(env.containers)
    assert len(cells) >= 0.8 * legal


def test_toggle_on_empty_cell_noop(env):
    s = GridState(3, 3, 5, 5, False)
    nxt, done, ok = env.step(s, TOGGLE, np.random.default_rng(0))
    assert nxt == s and not done and not ok


def test_toggle_requires_exact_colocation(env):
    s = GridState(5, 4, 5, 5, False)  # adjacent, not co-located
    nxt, _, _ = env.step(s, TOGGLE, np.random.default_rng(0))
    assert not nxt.holding


def test_noise_free_expert_sequence_succeeds():
    env = GridPickPlace(p_slip=0.0)
    pol = ScriptedGridPolicy(env, "expert", epsilon=0.0)
    rng = np.random.default_rng(2)
    state = env.reset(0, rng)
    # shortest-path step count: reach object, toggle, reach container, toggle
    d1 = abs(state.gripper_r - state.obj_r) + abs(state.gripper_c - state.obj_c)
    cr, cc = env.containers[0]
    d2 = abs(state.obj_r - cr) + abs(state.obj_c - cc)
    minimal = d1 + d2 + 2
    for t in range(1, 100):
        a = pol.sample(state, 0, 1, rng)[0]
        state, done, ok = env.step(state, a, rng, task_id=0)
        if done:
            break
    assert ok and t == minimal


def test_slip_drop_rate_on_carry():
    env = GridPickPlace(p_slip=0.1)
    rng = np.random.default_rng(3)
    n, carry = 10_000, 5
    drops = 0
    for _ in range(n):
        state = GridState(3, 0, 3, 0, True)
        for _ in range(carry):
            state, _, _ = env.step(state, 3, rng)  # move right
            if not state.holding:
                drops += 1
                break
    p = 1 - 0.9**carry
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(drops - n * p) < 3 * sigma


def test_out_of_space_action_rejected(env):
    with pytest.raises(ValueError):
        env.step(GridState(0, 0, 1, 1, False), 7, np.random.default_rng(0))


def test_transition_rows_sum_to_one(env):
    rng = np.random.default_rng(4)
    for _ in range(200):
        s = env.reset(0, rng)
        for a in range(5):
            probs = [p for p, _ in env.transitions(s, a)]
            assert abs(sum(probs) - 1.0) < 1e-12


def test_success_pure_function_of_state(env):
    s = GridState(0, 0, *env.containers[0], False)
    assert env.success(s, 0)
    assert not env.success(s._replace(holding=True, gripper_r=0, gripper_c=1), 0)


def test_markov_replay_equality(env):
    # replaying the same (state, action, seed) reproduces the transition
    s = GridState(2, 2, 2, 2, True)
    for seed in range(20):
        a1 = env.step(s, 1, np.random.default_rng(seed))
        a2 = env.step(s, 1, np.random.default_rng(seed))
        assert a1 == a2


# ------------------------------------------------------------ scripted grid


def test_sample_count_and_legality(env):
    pol = mixed_flawed_policy(env)
    acts = pol.sample(GridState(1, 1, 4, 4, False), 0, 50, np.random.default_rng(0))
    assert acts.shape == (50,)
    assert set(acts) <= set(range(5))


def test_expert_releases_at_container(env):
    pol = ScriptedGridPolicy(env, "expert")
    state = GridState(*env.containers[0], *env.containers[0], True)
    dist = pol.action_distribution(state, 0)
    assert dist.argmax() == TOGGLE


def test_premature_drop_release_frequency(env):
    pol = ScriptedGridPolicy(env, "premature-drop", q_early=0.5, drop_radius=2)
    cr, cc = env.containers[0]
    state = GridState(cr, cc + 1, cr, cc + 1, True)  # one cell short, holding
    rng = np.random.default_rng(9)
    n = 10_000
    toggles = int(np.sum(pol.sample(state, 0, n, rng) == TOGGLE))
    # release prob = q_early + leakage from the expert's epsilon tail
    expert_toggle = pol._expert_dist(state, 0)[TOGGLE]
    p = 0.5 + 0.5 * expert_toggle
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(toggles - n * p) < 3 * sigma


def test_distributions_are_normalized(env):
    rng = np.random.default_rng(11)
    for flavor in ("expert", "sloppy-grasp", "premature-drop", "late-release", "random", "mixed"):
        pol = ScriptedGridPolicy(env, flavor)
        for _ in range(50):
            s = env.reset(0, rng)
            d = pol.action_distribution(s, 0)
            assert abs(d.sum() - 1.0) < 1e-12 and np.all(d >= 0)


def test_mixed_baseline_in_headroom_band(env):
    pol = mixed_flawed_policy(env)
    rng = np.random.default_rng(12)
    succ = np.mean([rollout_episode(env, pol, ep % 2, 60, rng)[2] for ep in range(400)])
    assert 0.15 < succ < 0.55


# -------------------------------------------------------------- point mass


def test_wall_segment_crossing():
    assert _segments_cross((0.4, 0.3), (0.6, 0.3), (0.5, 0.0), (0.5, 0.55))
    assert not _segments_cross((0.4, 0.7), (0.6, 0.7), (0.5, 0.0), (0.5, 0.55))


def test_wall_blocks_motion():
    env = PointMassPlace()
    s = PointState(0.45, 0.3, 0.2, 0.2, False)
    nxt, _, _ = env.step(s, np.array([0.1, 0.0, 0.0]), np.random.default_rng(0))
    assert (nxt.ee_x, nxt.ee_y) == (0.45, 0.3)  # blocked
    nxt2, _, _ = env.step(PointState(0.45, 0.8, 0.2, 0.2, False),
                          np.array([0.1, 0.0, 0.0]), np.random.default_rng(0))
    assert nxt2.ee_x > 0.45  # above the wall, free


def test_positions_clipped_to_arena():
    env = PointMassPlace()
    s = PointState(0.02, 0.02, 0.5, 0.9, False)
    nxt, _, _ = env.step(s, np.array([-0.1, -0.1, 0.0]), np.random.default_rng(0))
    assert nxt.ee_x >= 0.0 and nxt.ee_y >= 0.0


def test_grasp_requires_proximity_and_closed_gripper():
    env = PointMassPlace()
    near = PointState(0.2, 0.2, 0.21, 0.2, False)
    nxt, _, _ = env.step(near, np.array([0.0, 0.0, 1.0]), np.random.default_rng(0))
    assert nxt.holding
    weak, _, _ = env.step(near, np.array([0.0, 0.0, 0.5]), np.random.default_rng(0))
    assert not weak.holding
    far = PointState(0.2, 0.2, 0.4, 0.4, False)
    nxt2, _, _ = env.step(far, np.array([0.0, 0.0, 1.0]), np.random.default_rng(0))
    assert not nxt2.holding


def test_point_expert_succeeds_mostly():
    env = PointMassPlace()
    pol = ScriptedPointPolicy(env, "expert")
    rng = np.random.default_rng(5)
    succ = np.mean([rollout_episode(env, pol, ep % 2, 120, rng)[2] for ep in range(100)])
    assert succ > 0.8


def test_point_wall_never_crossed_during_episodes():
    env = PointMassPlace()
    pol = ScriptedPointPolicy(env, "random")
    rng = np.random.default_rng(6)
    for _ in range(50):
        state = env.reset(1, rng)
        prev = (state.ee_x, state.ee_y)
        for _ in range(60):
            a = pol.sample(state, 1, 1, rng)[0]
            state, done, _ = env.step(state, a, rng, 1)
            cur = (state.ee_x, state.ee_y)
            if cur != prev:
                assert not _segments_cross(prev, cur, *env.wall)
            prev = cur
            if done:
                break


# ----------------------------------------------------------------- dataset


def test_generate_expert_only_noise_free_all_success():
    env = GridPickPlace(p_slip=0.0)
    pol = ScriptedGridPolicy(env, "expert", epsilon=0.0)
    ds = generate_dataset(env, [(pol, 1.0)], 20, 3, 0.98, np.random.default_rng(0))
    assert ds.success_rate == 1.0


def test_generate_mixture_between_pure_rates():
    env = GridPickPlace()
    expert = ScriptedGridPolicy(env, "expert")
    rand = ScriptedGridPolicy(env, "random")
    rng = np.random.default_rng(1)
    ds_e = generate_dataset(env, [(expert, 1.0)], 60, 3, 0.98, np.random.default_rng(2))
    ds_r = generate_dataset(env, [(rand, 1.0)], 60, 3, 0.98, np.random.default_rng(3))
    ds_m = generate_dataset(env, [(expert, 0.5), (rand, 0.5)], 120, 3, 0.98, rng)
    assert ds_r.success_rate < ds_m.success_rate < ds_e.success_rate


def test_generated_dataset_satisfies_data_invariants():
    from vsteer.data import returns_to_go

    env = GridPickPlace()
    ds = generate_dataset(env, [(mixed_flawed_policy(env), 1.0)], 40, 3, 0.98,
                          np.random.default_rng(4))
    for t in ds.trajectories:
        assert set(np.unique(t.rewards)) <= {0.0, -1.0}
        np.testing.assert_array_equal(t.returns, returns_to_go(t.rewards, 0.98))
        if t.success:
            n_pos = min(3, len(t))
            assert np.all(t.rewards[-n_pos:] == 0.0)
        else:
            assert np.all(t.rewards == -1.0)


def test_generate_rejects_bad_weights():
    env = GridPickPlace()
    with pytest.raises(ValueError):
        generate_dataset(env, [(ScriptedGridPolicy(env), 0.5)], 5, 3, 0.98,
                         np.random.default_rng(0))
