"""Trajectory data model: reward relabeling, returns-to-go, minibatch
sampling, trajectory subsampling, and a checksummed on-disk container.

Transitions are stored as flat parallel arrays with a trajectory index so the
same dataset serves trajectory-level access (returns) and transition-level
access (batches).
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

_FILE_MAGIC = "vsteer-dataset"
_FILE_VERSION = 1


class DatasetIOError(RuntimeError):
    pass


class DatasetVersionError(DatasetIOError):
    pass


class DatasetTruncatedError(DatasetIOError):
    pass


class DatasetChecksumError(DatasetIOError):
    pass


def relabel_rewards(traj_length: int, success: bool, horizon: int) -> np.ndarray:
    """Sparse shifted rewards: the final ``min(horizon, T)`` steps of a
    successful trajectory get 0, everything else gets -1."""
    if traj_length < 1:
        raise ValueError("trajectory length must be >= 1")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    rewards = np.full(traj_length, -1.0)
    if success:
        n_pos = min(horizon, traj_length)
        if n_pos > 0:
            rewards[-n_pos:] = 0.0
    return rewards


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted suffix sums by backward recursion."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty reward sequence")
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("rewards must be finite")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class Trajectory:
    """One episode: T parallel steps, with the successor state stored per
    transition (so the terminal next-state is kept explicitly)."""

    states: np.ndarray        # (T, obs_dim)
    actions: np.ndarray       # (T,) int for discrete, (T, act_dim) float for continuous
    next_states: np.ndarray   # (T, obs_dim)
    rewards: np.ndarray       # (T,), values in {0, -1} after relabeling
    returns: np.ndarray       # (T,), discounted returns-to-go
    task_id: int
    success: bool

    def __len__(self) -> int:
        return self.states.shape[0]

    @classmethod
    def from_episode(cls, states, actions, task_id, success, horizon, gamma):
        """Build from a raw rollout of T+1 states and T actions, relabeling
        rewards and computing returns."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions)
        T = actions.shape[0]
        if states.shape[0] != T + 1:
            raise ValueError(f"expected {T + 1} states for {T} actions, got {states.shape[0]}")
        rewards = relabel_rewards(T, success, horizon)
        return cls(
            states=states[:-1].copy(),
            actions=actions.copy(),
            next_states=states[1:].copy(),
            rewards=rewards,
            returns=returns_to_go(rewards, gamma),
            task_id=int(task_id),
            success=bool(success),
        )


@dataclass
class DatasetManifest:
    task_table: dict[int, str]
    n_trajectories: int
    n_transitions: int
    action_space: dict            # {"type": "discrete", "n": ...} or {"type": "box", "dim": ..., "low": ..., "high": ...}
    obs_dim: int
    gamma: float
    horizon: int                  # H used when relabeling
    seed: int

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["task_table"] = {str(k): v for k, v in self.task_table.items()}
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["task_table"] = {int(k): v for k, v in d["task_table"].items()}
        return cls(**d)


@dataclass
class TransitionBatch:
    """Parallel arrays of batch size B."""

    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    terminal: np.ndarray      # gamma-mask 0 at terminal transitions
    task_id: np.ndarray
    return_to_go: np.ndarray
    next_action: np.ndarray   # dataset successor action (SARSA); dummy at terminals

    def __len__(self) -> int:
        return self.state.shape[0]


class Dataset:
    """Immutable trajectory collection with flat transition arrays."""

    def __init__(self, trajectories: list[Trajectory], manifest: DatasetManifest):
        self.trajectories = list(trajectories)
        self.manifest = manifest
        self._build_flat()
        self._validate()

    def _build_flat(self) -> None:
        trajs = self.trajectories
        if trajs:
            self.states = np.concatenate([t.states for t in trajs])
            self.actions = np.concatenate([t.actions for t in trajs])
            self.next_states = np.concatenate([t.next_states for t in trajs])
            self.rewards = np.concatenate([t.rewards for t in trajs])
            self.returns = np.concatenate([t.returns for t in trajs])
            self.task_ids = np.concatenate([np.full(len(t), t.task_id) for t in trajs])
            self.traj_index = np.concatenate([np.full(len(t), i) for i, t in enumerate(trajs)])
            terminal = []
            next_actions = []
            for t in trajs:
                # only success actually terminates the task; a failed episode
                # ends by truncation and must keep bootstrapping
                flags = np.zeros(len(t), dtype=bool)
                flags[-1] = t.success
                terminal.append(flags)
                # successor action within the trajectory; last one repeats itself
                # and is masked out by the terminal flag
                next_actions.append(np.concatenate([t.actions[1:], t.actions[-1:]]))
            self.terminals = np.concatenate(terminal)
            self.next_actions = np.concatenate(next_actions)
        else:
            dim = self.manifest.obs_dim
            self.states = np.zeros((0, dim))
            self.actions = np.zeros(0, dtype=np.int64)
            self.next_states = np.zeros((0, dim))
            self.rewards = np.zeros(0)
            self.returns = np.zeros(0)
            self.task_ids = np.zeros(0, dtype=np.int64)
            self.traj_index = np.zeros(0, dtype=np.int64)
            self.terminals = np.zeros(0, dtype=bool)
            self.next_actions = np.zeros(0, dtype=np.int64)

    def _validate(self) -> None:
        m = self.manifest
        if m.n_trajectories != len(self.trajectories):
            raise ValueError("manifest trajectory count does not match contents")
        if m.n_transitions != self.states.shape[0]:
            raise ValueError("manifest transition count does not match contents")
        if not (0.0 < m.gamma < 1.0):
            raise ValueError("manifest gamma must lie in (0, 1)")

    @property
    def n_transitions(self) -> int:
        return self.states.shape[0]

    @property
    def success_rate(self) -> float:
        if not self.trajectories:
            return 0.0
        return float(np.mean([t.success for t in self.trajectories]))

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform with-replacement sampling over all transitions."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_transitions == 0:
            raise ValueError("cannot sample from an empty dataset")
        idx = rng.integers(0, self.n_transitions, size=batch_size)
        return TransitionBatch(
            state=self.states[idx],
            action=self.actions[idx],
            reward=self.rewards[idx],
            next_state=self.next_states[idx],
            terminal=self.terminals[idx],
            task_id=self.task_ids[idx],
            return_to_go=self.returns[idx],
            next_action=self.next_actions[idx],
        )

    def subsample(self, fraction: float, rng: np.random.Generator) -> "Dataset":
        """Keep ``ceil(fraction * N)`` whole trajectories, chosen uniformly
        without replacement."""
        if not (0.0 < fraction <= 1.0):
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        n = len(self.trajectories)
        keep = int(np.ceil(fraction * n))
        chosen = rng.choice(n, size=keep, replace=False)
        trajs = [self.trajectories[i] for i in sorted(chosen)]
        manifest = DatasetManifest(
            task_table=dict(self.manifest.task_table),
            n_trajectories=len(trajs),
            n_transitions=int(sum(len(t) for t in trajs)),
            action_space=dict(self.manifest.action_space),
            obs_dim=self.manifest.obs_dim,
            gamma=self.manifest.gamma,
            horizon=self.manifest.horizon,
            seed=self.manifest.seed,
        )
        return Dataset(trajs, manifest)


# ----------------------------------------------------------------- file I/O


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset as a header line plus two checksummed sections
    (manifest JSON, transition arrays)."""
    manifest_bytes = dataset.manifest.to_json().encode()

    arrays: dict[str, np.ndarray] = {}
    for i, t in enumerate(dataset.trajectories):
        arrays[f"t{i}__states"] = t.states
        arrays[f"t{i}__actions"] = t.actions
        arrays[f"t{i}__next_states"] = t.next_states
        arrays[f"t{i}__rewards"] = t.rewards
        arrays[f"t{i}__returns"] = t.returns
        arrays[f"t{i}__meta"] = np.array([t.task_id, int(t.success)], dtype=np.int64)
    buf = io.BytesIO()
    np.savez(buf, n=np.array(len(dataset.trajectories)), **arrays)
    payload = buf.getvalue()

    header = json.dumps({
        "magic": _FILE_MAGIC,
        "version": _FILE_VERSION,
        "sections": [
            {"name": "manifest", "length": len(manifest_bytes), "sha256": _sha256(manifest_bytes)},
            {"name": "arrays", "length": len(payload), "sha256": _sha256(payload)},
        ],
    }).encode()
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(manifest_bytes)
        fh.write(payload)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{path}: unreadable header") from exc
    if header.get("magic") != _FILE_MAGIC:
        raise DatasetIOError(f"{path}: not a vsteer dataset file")
    if header.get("version") != _FILE_VERSION:
        raise DatasetVersionError(
            f"{path}: version {header.get('version')} unsupported (expected {_FILE_VERSION})")

    sections: dict[str, bytes] = {}
    offset = 0
    for sec in header["sections"]:
        chunk = body[offset : offset + sec["length"]]
        if len(chunk) != sec["length"]:
            raise DatasetTruncatedError(f"{path}: section {sec['name']!r} truncated")
        if _sha256(chunk) != sec["sha256"]:
            raise DatasetChecksumError(f"{path}: checksum mismatch in section {sec['name']!r}")
        sections[sec["name"]] = chunk
        offset += sec["length"]

    manifest = DatasetManifest.from_json(sections["manifest"].decode())
    data = np.load(io.BytesIO(sections["arrays"]), allow_pickle=False)
    trajectories = []
    for i in range(int(data["n"])):
        meta = data[f"t{i}__meta"]
        trajectories.append(Trajectory(
            states=data[f"t{i}__states"],
            actions=data[f"t{i}__actions"],
            next_states=data[f"t{i}__next_states"],
            rewards=data[f"t{i}__rewards"],
            returns=data[f"t{i}__returns"],
            task_id=int(meta[0]),
            success=bool(meta[1]),
        ))
    return Dataset(trajectories, manifest)
