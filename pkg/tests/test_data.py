import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsteer.data import (
    Dataset,
    DatasetChecksumError,
    DatasetManifest,
    DatasetTruncatedError,
    DatasetVersionError,
    Trajectory,
    load_dataset,
    relabel_rewards,
    returns_to_go,
    save_dataset,
)

GAMMA = 0.98


def make_traj(T, task_id=0, success=True, seed=0, horizon=3, obs_dim=4):
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((T + 1, obs_dim))
    actions = rng.integers(0, 5, size=T)
    return Trajectory.from_episode(states, actions, task_id, success, horizon, GAMMA)


def make_dataset(trajs, obs_dim=4):
    manifest = DatasetManifest(
        task_table={0: "put the block in the bin"},
        n_trajectories=len(trajs),
        n_transitions=int(sum(len(t) for t in trajs)),
        action_space={"type": "discrete", "n": 5},
        obs_dim=obs_dim,
        gamma=GAMMA,
        horizon=3,
        seed=0,
    )
    return Dataset(trajs, manifest)


# ----------------------------------------------------------------- relabel


def test_relabel_success_window():
    np.testing.assert_array_equal(relabel_rewards(10, True, 3), [-1.0] * 7 + [0.0] * 3)


def test_relabel_zero_window():
    np.testing.assert_array_equal(relabel_rewards(10, True, 0), [-1.0] * 10)


def test_relabel_clamps_to_length():
    np.testing.assert_array_equal(relabel_rewards(2, True, 3), [0.0, 0.0])


def test_relabel_failure_all_negative():
    np.testing.assert_array_equal(relabel_rewards(5, False, 3), [-1.0] * 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.booleans(), st.integers(0, 10))
def test_relabel_idempotent_and_binary(T, success, H):
    first = relabel_rewards(T, success, H)
    assert set(np.unique(first)) <= {0.0, -1.0}
    # relabeling with the same (success, H) is a fixed point of the labeling rule
    np.testing.assert_array_equal(relabel_rewards(T, success, H), first)


# ------------------------------------------------------------------ returns


def test_returns_zero_rewards():
    np.testing.assert_array_equal(returns_to_go(np.zeros(5), GAMMA), np.zeros(5))


def test_returns_gamma_one_not_rejected_but_zero_rejected():
    with pytest.raises(ValueError):
        returns_to_go(np.zeros(3), 0.0)


def test_returns_tiny_gamma_near_rewards():
    r = np.array([-1.0, 0.0, -1.0])
    out = returns_to_go(r, 1e-12)
    np.testing.assert_allclose(out, r, atol=1e-11)


def test_returns_hand_recursion():
    np.testing.assert_allclose(
        returns_to_go(np.array([-1.0, -1.0, 0.0]), GAMMA), [-1.98, -1.0, 0.0], atol=1e-12)


def test_returns_empty_rejected():
    with pytest.raises(ValueError):
        returns_to_go(np.array([]), GAMMA)


def test_trajectory_return_consistency():
    t = make_traj(12, success=True)
    np.testing.assert_array_equal(t.returns, returns_to_go(t.rewards, GAMMA))
    # success trajectory with H=3: returns monotone non-decreasing in t
    assert np.all(np.diff(t.returns) >= -1e-12)


# ----------------------------------------------------------------- sampling


def test_sample_single_transition_repeats():
    ds = make_dataset([make_traj(1)])
    batch = ds.sample_batch(4, np.random.default_rng(0))
    assert len(batch) == 4
    assert np.all(batch.state == batch.state[0])
    assert np.all(batch.terminal)


def test_sample_deterministic_given_seed():
    ds = make_dataset([make_traj(10, seed=i) for i in range(5)])
    a = ds.sample_batch(32, np.random.default_rng(7))
    b = ds.sample_batch(32, np.random.default_rng(7))
    np.testing.assert_array_equal(a.state, b.state)
    np.testing.assert_array_equal(a.return_to_go, b.return_to_go)


def test_sample_zero_rejected():
    ds = make_dataset([make_traj(3)])
    with pytest.raises(ValueError):
        ds.sample_batch(0, np.random.default_rng(0))


def test_sampling_uniformity():
    ds = make_dataset([make_traj(10)])
    assert ds.n_transitions == 10
    rng = np.random.default_rng(123)
    idx_counts = np.zeros(10)
    batch = ds.sample_batch(100_000, rng)
    # recover indices via unique state rows
    for i in range(10):
        idx_counts[i] = np.sum(np.all(batch.state == ds.states[i], axis=1))
    n = 100_000
    p = 0.1
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(idx_counts - n * p) < 3.5 * sigma)


def test_terminal_flags_and_next_actions():
    t = make_traj(5)
    ds = make_dataset([t])
    assert list(ds.terminals) == [False] * 4 + [True]
    np.testing.assert_array_equal(ds.next_actions[:-1], t.actions[1:])


def test_truncated_failure_is_not_terminal():
    # a failed episode ends by hitting the time limit, not by absorbing, so
    # its last transition must keep its bootstrap
    ds = make_dataset([make_traj(5, success=False)])
    assert not ds.terminals.any()


# ---------------------------------------------------------------- subsample


def test_subsample_full_fraction_identity_counts():
    ds = make_dataset([make_traj(4, seed=i) for i in range(10)])
    sub = ds.subsample(1.0, np.random.default_rng(0))
    assert sub.manifest.n_trajectories == 10
    assert sub.manifest.n_transitions == ds.manifest.n_transitions


def test_subsample_half():
    ds = make_dataset([make_traj(2, seed=i) for i in range(100)])
    sub = ds.subsample(0.5, np.random.default_rng(1))
    assert sub.manifest.n_trajectories == 50


def test_subsample_rejects_nonpositive():
    ds = make_dataset([make_traj(2)])
    with pytest.raises(ValueError):
        ds.subsample(0.0, np.random.default_rng(0))


def test_subsample_overlap_near_hypergeometric_expectation():
    trajs = [make_traj(1, seed=i) for i in range(1000)]
    ds = make_dataset(trajs)
    picks = []
    for seed in (11, 22):
        sub = ds.subsample(0.5, np.random.default_rng(seed))
        picks.append({id(t) for t in sub.trajectories})
    overlap = len(picks[0] & picks[1]) / 500
    # expect ~50% overlap of the kept set; 3-sigma band for hypergeometric draw
    assert abs(overlap - 0.5) < 0.07


# -------------------------------------------------------------------- files


def test_roundtrip_empty(tmp_path):
    ds = make_dataset([])
    path = tmp_path / "empty.vds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.manifest.n_trajectories == 0
    assert back.n_transitions == 0


def test_roundtrip_bit_exact(tmp_path):
    ds = make_dataset([make_traj(6, seed=i, success=i % 2 == 0) for i in range(100)])
    path = tmp_path / "ds.vds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.manifest == ds.manifest
    for a, b in zip(ds.trajectories, back.trajectories):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.returns, b.returns)
        assert a.success == b.success and a.task_id == b.task_id


def test_corrupt_payload_byte_raises_checksum(tmp_path):
    ds = make_dataset([make_traj(6)])
    path = tmp_path / "ds.vds"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetChecksumError):
        load_dataset(path)


def test_truncated_file(tmp_path):
    ds = make_dataset([make_traj(6)])
    path = tmp_path / "ds.vds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 50])
    with pytest.raises(DatasetTruncatedError):
        load_dataset(path)


def test_version_mismatch(tmp_path):
    ds = make_dataset([make_traj(3)])
    path = tmp_path / "ds.vds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    head, rest = raw.split(b"\n", 1)
    head = head.replace(b'"version": 1', b'"version": 99')
    path.write_bytes(head + b"\n" + rest)
    with pytest.raises(DatasetVersionError):
        load_dataset(path)
