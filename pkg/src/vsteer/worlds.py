"""Desk-scale task-conditioned environments and scripted stochastic policies.

Two embodiment analogues:

* :class:`GridPickPlace` -- discrete N x N pick-and-place with a stochastic
  slip during carries and exact-co-location grasping. Small enough to
  enumerate, which is what the tabular oracles feed on.
* :class:`PointMassPlace` -- continuous 2D end-effector with a wall obstacle
  between regions, a grasp radius, and a gripper channel.

Scripted policies reproduce a taxonomy of failure flavors (sloppy grasping,
premature drops, late releases) on top of a shortest-path expert. All of them
expose ``sample(state, task_id, count, rng)``; the grid flavors additionally
expose their exact per-state action distribution for the oracle module.
"""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .data import Dataset, DatasetManifest, Trajectory

log = logging.getLogger(__name__)

UP, DOWN, LEFT, RIGHT, TOGGLE = range(5)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

GRID_FLAVORS = ("expert", "sloppy-grasp", "premature-drop", "late-release", "random", "mixed")


class GridState(NamedTuple):
    gripper_r: int
    gripper_c: int
    obj_r: int
    obj_c: int
    holding: bool


class GridPickPlace:
    """Discrete pick-and-place grid.

    One movable object, one or more fixed container cells; task ``i`` asks for
    the object to end up in container ``i``. Grasping requires exact
    co-location; while holding, every move drops the object with probability
    ``p_slip``. Success is a pure function of state: object in the task's
    container and not held.
    """

    n_actions = 5

    def __init__(self, n: int = 7, containers: tuple[tuple[int, int], ...] = ((0, 1), (0, 5)),
                 p_slip: float = 0.08):
        if not containers:
            raise ValueError("need at least one container")
        self.n = int(n)
        self.containers = tuple((int(r), int(c)) for r, c in containers)
        for r, c in self.containers:
            if not (0 <= r < n and 0 <= c < n):
                raise ValueError(f"container {(r, c)} outside the {n}x{n} grid")
        if not (0.0 <= p_slip < 1.0):
            raise ValueError("p_slip must lie in [0, 1)")
        self.p_slip = float(p_slip)
        self.task_table = {
            i: f"put the block in container {i}" for i in range(len(self.containers))
        }
        self.obs_dim = 5 + 2 * len(self.containers)

    # ------------------------------------------------------------- protocol

    def check_task(self, task_id: int) -> None:
        if task_id not in self.task_table:
            raise ValueError(f"unknown task id {task_id}")

    def success(self, state: GridState, task_id: int) -> bool:
        target = self.containers[task_id]
        return (state.obj_r, state.obj_c) == target and not state.holding

    def reset(self, task_id: int, rng: np.random.Generator) -> GridState:
        self.check_task(task_id)
        cells = [(r, c) for r in range(self.n) for c in range(self.n)]
        spawnable = [cell for cell in cells if cell not in self.containers]
        g = cells[rng.integers(len(cells))]
        o = spawnable[rng.integers(len(spawnable))]
        return GridState(g[0], g[1], o[0], o[1], False)

    def transitions(self, state: GridState, action: int) -> list[tuple[float, GridState]]:
        """Exact successor distribution for (state, action)."""
        if action not in range(self.n_actions):
            raise ValueError(f"action {action} outside the 5-action space")
        if action == TOGGLE:
            if state.holding:
                nxt = state._replace(holding=False)
            elif (state.gripper_r, state.gripper_c) == (state.obj_r, state.obj_c):
                nxt = state._replace(holding=True)
            else:
                nxt = state
            return [(1.0, nxt)]
        dr, dc = _MOVES[action]
        gr = min(max(state.gripper_r + dr, 0), self.n - 1)
        gc = min(max(state.gripper_c + dc, 0), self.n - 1)
        if not state.holding:
            return [(1.0, state._replace(gripper_r=gr, gripper_c=gc))]
        carried = GridState(gr, gc, gr, gc, True)
        if self.p_slip == 0.0:
            return [(1.0, carried)]
        dropped = carried._replace(holding=False)
        return [(1.0 - self.p_slip, carried), (self.p_slip, dropped)]

    def step(self, state: GridState, action: int, rng: np.random.Generator,
             task_id: int = 0):
        branches = self.transitions(state, action)
        if len(branches) == 1:
            nxt = branches[0][1]
        else:
            u = rng.random()
            acc = 0.0
            nxt = branches[-1][1]
            for p, candidate in branches:
                acc += p
                if u < acc:
                    nxt = candidate
                    break
        done = self.success(nxt, task_id)
        return nxt, done, done

    def observe(self, state: GridState) -> np.ndarray:
        scale = max(self.n - 1, 1)
        feats = [state.gripper_r / scale, state.gripper_c / scale,
                 state.obj_r / scale, state.obj_c / scale, float(state.holding)]
        for r, c in self.containers:
            feats.extend((r / scale, c / scale))
        return np.array(feats)

    def all_states(self) -> list[GridState]:
        """Every syntactically valid state (holding implies co-location)."""
        states = []
        for gr in range(self.n):
            for gc in range(self.n):
                states.append(GridState(gr, gc, gr, gc, True))
                for orow in range(self.n):
                    for ocol in range(self.n):
                        states.append(GridState(gr, gc, orow, ocol, False))
        return states

    def initial_support(self, task_id: int) -> list[GridState]:
        self.check_task(task_id)
        out = []
        for gr in range(self.n):
            for gc in range(self.n):
                for orow in range(self.n):
                    for ocol in range(self.n):
                        if (orow, ocol) in self.containers:
                            continue
                        out.append(GridState(gr, gc, orow, ocol, False))
        return out


# ------------------------------------------------------- scripted policies


def _toward(src: tuple[int, int], dst: tuple[int, int]) -> list[int]:
    """Move actions that strictly reduce Manhattan distance."""
    acts = []
    if dst[0] < src[0]:
        acts.append(UP)
    elif dst[0] > src[0]:
        acts.append(DOWN)
    if dst[1] < src[1]:
        acts.append(LEFT)
    elif dst[1] > src[1]:
        acts.append(RIGHT)
    return acts


def _manhattan(a: tuple[int, int], b: tuple[int, int]) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


class ScriptedGridPolicy:
    """Stochastic scripted policy over :class:`GridPickPlace` states.

    ``expert`` follows the shortest path with epsilon exploration noise. The
    flawed flavors overlay one pathology each:

    * ``sloppy-grasp``: attempts grasps from cells adjacent to the object,
      which fail (grasping needs exact co-location).
    * ``premature-drop``: releases while still short of the container.
    * ``late-release``: dithers instead of releasing once over the container,
      exposing the carry to slip drops.
    * ``mixed``: all three pathologies composed. Their trigger zones are
      disjoint (adjacent-to-object vs. short-of-container vs. over-container),
      so composition applies whichever rule matches the current state.
    """

    def __init__(self, env: GridPickPlace, flavor: str = "expert", epsilon: float = 0.1,
                 q_sloppy: float = 0.5, q_early: float = 0.8, hold_bias: float = 0.8,
                 drop_radius: int = 3):
        if flavor not in GRID_FLAVORS:
            raise ValueError(f"unknown flavor {flavor!r}")
        self.env = env
        self.flavor = flavor
        self.epsilon = float(epsilon)
        self.q_sloppy = float(q_sloppy)
        self.q_early = float(q_early)
        self.hold_bias = float(hold_bias)
        self.drop_radius = int(drop_radius)

    def _expert_dist(self, state: GridState, task_id: int) -> np.ndarray:
        env = self.env
        gripper = (state.gripper_r, state.gripper_c)
        if state.holding:
            target = env.containers[task_id]
            core = [TOGGLE] if gripper == target else _toward(gripper, target)
        else:
            obj = (state.obj_r, state.obj_c)
            core = [TOGGLE] if gripper == obj else _toward(gripper, obj)
        dist = np.full(5, self.epsilon / 5.0)
        for a in core:
            dist[a] += (1.0 - self.epsilon) / len(core)
        return dist

    def action_distribution(self, state: GridState, task_id: int) -> np.ndarray:
        """Exact per-state action probabilities (consumed by the oracles)."""
        env = self.env
        flavor = self.flavor
        if flavor == "random":
            return np.full(5, 0.2)

        expert = self._expert_dist(state, task_id)
        gripper = (state.gripper_r, state.gripper_c)
        obj = (state.obj_r, state.obj_c)
        target = env.containers[task_id]

        sloppy = flavor in ("sloppy-grasp", "mixed")
        premature = flavor in ("premature-drop", "mixed")
        late = flavor in ("late-release", "mixed")

        if sloppy and not state.holding and _manhattan(gripper, obj) == 1:
            dist = (1.0 - self.q_sloppy) * expert
            dist[TOGGLE] += self.q_sloppy
            return dist
        if premature and state.holding and 1 <= _manhattan(gripper, target) <= self.drop_radius:
            dist = (1.0 - self.q_early) * expert
            dist[TOGGLE] += self.q_early
            return dist
        if late and state.holding and gripper == target:
            dist = (1.0 - self.hold_bias) * expert
            dist[:4] += self.hold_bias / 4.0
            return dist
        return expert

    def sample(self, state: GridState, task_id: int, count: int,
               rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        dist = self.action_distribution(state, task_id)
        return rng.choice(5, size=count, p=dist)


class RandomGridPolicy(ScriptedGridPolicy):
    def __init__(self, env: GridPickPlace):
        super().__init__(env, flavor="random")


# ------------------------------------------------------------- continuous


class PointState(NamedTuple):
    ee_x: float
    ee_y: float
    obj_x: float
    obj_y: float
    holding: bool


def _segments_cross(p1, p2, q1, q2) -> bool:
    """Proper/improper intersection test between segments p1-p2 and q1-q2."""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True
    for d, (a, b, c) in ((d1, (q1, q2, p1)), (d2, (q1, q2, p2)),
                         (d3, (p1, p2, q1)), (d4, (p1, p2, q2))):
        if abs(d) < 1e-15 and on_seg(a, b, c):
            return True
    return False


class PointMassPlace:
    """Continuous 2D end-effector in the unit arena with a wall obstacle.

    Actions are ``(dx, dy, g)`` with displacements in ``[-0.1, 0.1]`` and a
    gripper command in ``[0, 1]``. Grasping succeeds only within ``r_grasp``
    of the object with ``g > 0.8``; a held object is released whenever
    ``g < 0.5``. A straight-line step may never cross the wall segment; a
    blocked step leaves the end-effector in place.
    """

    max_delta = 0.1
    grasp_close = 0.8
    hold_open = 0.5

    def __init__(self, wall=((0.5, 0.0), (0.5, 0.55)),
                 containers=((0.85, 0.25), (0.85, 0.8)),
                 r_grasp: float = 0.05, r_place: float = 0.07):
        self.wall = (tuple(wall[0]), tuple(wall[1]))
        self.containers = tuple((float(x), float(y)) for x, y in containers)
        self.r_grasp = float(r_grasp)
        self.r_place = float(r_place)
        self.task_table = {
            i: f"put the puck in basket {i}" for i in range(len(self.containers))
        }
        self.obs_dim = 5 + 2 * len(self.containers)
        self.action_low = np.array([-self.max_delta, -self.max_delta, 0.0])
        self.action_high = np.array([self.max_delta, self.max_delta, 1.0])

    def check_task(self, task_id: int) -> None:
        if task_id not in self.task_table:
            raise ValueError(f"unknown task id {task_id}")

    def success(self, state: PointState, task_id: int) -> bool:
        cx, cy = self.containers[task_id]
        return (not state.holding
                and np.hypot(state.obj_x - cx, state.obj_y - cy) < self.r_place)

    def reset(self, task_id: int, rng: np.random.Generator) -> PointState:
        self.check_task(task_id)
        # spawn both the end-effector and the object left of the wall
        ee = (rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.95))
        obj = (rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.95))
        return PointState(ee[0], ee[1], obj[0], obj[1], False)

    def step(self, state: PointState, action: np.ndarray, rng: np.random.Generator,
             task_id: int = 0):
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (3,):
            raise ValueError(f"expected a (dx, dy, g) action, got shape {action.shape}")
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        dx = float(np.clip(action[0], -self.max_delta, self.max_delta))
        dy = float(np.clip(action[1], -self.max_delta, self.max_delta))
        g = float(np.clip(action[2], 0.0, 1.0))

        old = (state.ee_x, state.ee_y)
        new = (float(np.clip(old[0] + dx, 0.0, 1.0)), float(np.clip(old[1] + dy, 0.0, 1.0)))
        if _segments_cross(old, new, *self.wall):
            new = old
        ee_x, ee_y = new
        obj_x, obj_y = state.obj_x, state.obj_y
        holding = state.holding
        if holding:
            if g < self.hold_open:
                holding = False
                # object stays where it was released (at the new ee position)
                obj_x, obj_y = ee_x, ee_y
            else:
                obj_x, obj_y = ee_x, ee_y
        else:
            if g > self.grasp_close and np.hypot(ee_x - obj_x, ee_y - obj_y) < self.r_grasp:
                holding = True
                obj_x, obj_y = ee_x, ee_y
        nxt = PointState(ee_x, ee_y, obj_x, obj_y, holding)
        done = self.success(nxt, task_id)
        return nxt, done, done

    def observe(self, state: PointState) -> np.ndarray:
        feats = [state.ee_x, state.ee_y, state.obj_x, state.obj_y, float(state.holding)]
        for cx, cy in self.containers:
            feats.extend((cx, cy))
        return np.array(feats)


POINT_FLAVORS = ("expert", "sloppy-grasp", "premature-drop", "random", "mixed")


class ScriptedPointPolicy:
    """Scripted continuous policy with waypoint routing around the wall."""

    def __init__(self, env: PointMassPlace, flavor: str = "expert",
                 motion_noise: float = 0.02, aim_noise: float = 0.05,
                 q_early: float = 0.15):
        if flavor not in POINT_FLAVORS:
            raise ValueError(f"unknown flavor {flavor!r}")
        self.env = env
        self.flavor = flavor
        self.motion_noise = float(motion_noise)
        self.aim_noise = float(aim_noise)
        self.q_early = float(q_early)

    def _goal(self, state: PointState, task_id: int) -> tuple[float, float]:
        env = self.env
        if state.holding:
            target = env.containers[task_id]
        else:
            target = (state.obj_x, state.obj_y)
        ee = (state.ee_x, state.ee_y)
        if _segments_cross(ee, target, *env.wall):
            top = max(env.wall[0][1], env.wall[1][1])
            return (env.wall[0][0], min(top + 0.12, 1.0))
        return target

    def _one(self, state: PointState, task_id: int, flavor: str,
             rng: np.random.Generator) -> np.ndarray:
        env = self.env
        if flavor == "random":
            return rng.uniform(env.action_low, env.action_high)
        gx, gy = self._goal(state, task_id)
        if flavor == "sloppy-grasp" and not state.holding:
            gx += rng.normal(0.0, self.aim_noise)
            gy += rng.normal(0.0, self.aim_noise)
        dx = np.clip(gx - state.ee_x + rng.normal(0.0, self.motion_noise),
                     -env.max_delta, env.max_delta)
        dy = np.clip(gy - state.ee_y + rng.normal(0.0, self.motion_noise),
                     -env.max_delta, env.max_delta)

        dist_obj = np.hypot(state.ee_x - state.obj_x, state.ee_y - state.obj_y)
        cx, cy = env.containers[task_id]
        dist_cont = np.hypot(state.ee_x - cx, state.ee_y - cy)
        if state.holding:
            g = 0.0 if dist_cont < env.r_place * 0.7 else 1.0
            if flavor == "premature-drop" and dist_cont < 0.3 and rng.random() < self.q_early:
                g = 0.0
        else:
            g = 1.0 if dist_obj < 1.5 * env.r_grasp else 0.0
            if flavor == "sloppy-grasp" and dist_obj < 2.0 * env.r_grasp:
                g = rng.uniform(0.5, 1.0)
        return np.array([dx, dy, g])

    def sample(self, state: PointState, task_id: int, count: int,
               rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        flavors = []
        for _ in range(count):
            if self.flavor == "mixed":
                flavors.append(("sloppy-grasp", "premature-drop")[rng.integers(2)])
            else:
                flavors.append(self.flavor)
        return np.stack([self._one(state, task_id, f, rng) for f in flavors])


# --------------------------------------------------------- dataset rollout


def rollout_episode(env, policy, task_id: int, t_max: int, rng: np.random.Generator):
    """Run one episode; returns (observations T+1, actions T, success)."""
    state = env.reset(task_id, rng)
    obs = [env.observe(state)]
    actions = []
    success = False
    for _ in range(t_max):
        action = policy.sample(state, task_id, 1, rng)[0]
        state, done, ok = env.step(state, action, rng, task_id)
        obs.append(env.observe(state))
        actions.append(action)
        if done:
            success = bool(ok)
            break
    return np.array(obs), np.array(actions), success


def generate_dataset(env, policy_mixture, n_trajectories: int, horizon: int,
                     gamma: float, rng: np.random.Generator, t_max: int = 60,
                     seed_label: int = 0) -> Dataset:
    """Roll out a weighted mixture of policies and package the episodes.

    ``policy_mixture`` is a list of ``(policy, weight)`` pairs; weights must
    sum to 1. Tasks are drawn uniformly from the env's task table.
    """
    policies = [p for p, _ in policy_mixture]
    weights = np.array([w for _, w in policy_mixture], dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("mixture weights must sum to 1")
    task_ids = sorted(env.task_table)
    trajectories = []
    for _ in range(n_trajectories):
        task = task_ids[rng.integers(len(task_ids))]
        policy = policies[rng.choice(len(policies), p=weights)]
        obs, actions, success = rollout_episode(env, policy, task, t_max, rng)
        trajectories.append(Trajectory.from_episode(obs, actions, task, success, horizon, gamma))
    if not any(t.success for t in trajectories):
        log.warning("generated dataset contains zero successful trajectories; "
                    "critic targets will be uniformly negative")
    if hasattr(env, "n_actions"):
        action_space = {"type": "discrete", "n": env.n_actions}
    else:
        action_space = {"type": "box", "dim": 3,
                        "low": env.action_low.tolist(), "high": env.action_high.tolist()}
    manifest = DatasetManifest(
        task_table=dict(env.task_table),
        n_trajectories=len(trajectories),
        n_transitions=int(sum(len(t) for t in trajectories)),
        action_space=action_space,
        obs_dim=env.obs_dim,
        gamma=float(gamma),
        horizon=int(horizon),
        seed=int(seed_label),
    )
    return Dataset(trajectories, manifest)


def mixed_flawed_policy(env: GridPickPlace, epsilon: float = 0.2, **kwargs) -> ScriptedGridPolicy:
    """The canonical flawed baseline: sloppy grasps, premature drops, and late
    releases composed, calibrated so its raw success sits in the 20-50% band."""
    return ScriptedGridPolicy(env, flavor="mixed", epsilon=epsilon, **kwargs)
