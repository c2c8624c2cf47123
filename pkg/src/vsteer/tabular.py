"""Ground-truth machinery on small discrete MDPs.

Exact value iteration, linear-solve policy evaluation, Monte-Carlo policy
evaluation, and a closed-form evaluation of best-of-K re-ranked policies via
multiset enumeration of the candidate draws. These are the brute-force
oracles behind the derived expected values and the acceptance checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import factorial

import numpy as np

STATE_CAP = 1_000_000


@dataclass
class TabularMDP:
    """Enumerated MDP with absorbing success states.

    Rewards follow the dataset convention: -1 per transition, 0 for a
    transition that lands in a success state. Terminal (success) states
    self-loop with reward 0.
    """

    states: list            # index -> environment state object
    index: dict             # environment state -> index
    n_actions: int
    P: np.ndarray           # (S, A, S) row-stochastic
    R: np.ndarray           # (S, A) expected reward
    terminal: np.ndarray    # (S,) bool
    gamma: float
    initial_dist: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return len(self.states)


def enumerate_grid(env, task_id: int, gamma: float = 0.98) -> TabularMDP:
    """Enumerate all states of a GridPickPlace task reachable from the initial
    support, building exact transition rows (including slip branching)."""
    env.check_task(task_id)
    initial = env.initial_support(task_id)
    index: dict = {}
    states: list = []

    def add(s) -> int:
        if s not in index:
            if len(states) >= STATE_CAP:
                raise ValueError(f"state space exceeds cap of {STATE_CAP}")
            index[s] = len(states)
            states.append(s)
        return index[s]

    frontier = [add(s) for s in initial]
    rows: dict[int, list] = {}
    seen = set(frontier)
    while frontier:
        i = frontier.pop()
        s = states[i]
        if env.success(s, task_id):
            continue
        per_action = []
        for a in range(env.n_actions):
            branch = []
            for p, nxt in env.transitions(s, a):
                j = add(nxt)
                branch.append((p, j))
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
            per_action.append(branch)
        rows[i] = per_action

    S, A = len(states), env.n_actions
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    terminal = np.array([env.success(s, task_id) for s in states])
    for i in range(S):
        if terminal[i]:
            P[i, :, i] = 1.0
            continue
        for a in range(A):
            for p, j in rows[i][a]:
                P[i, a, j] += p
                R[i, a] += p * (0.0 if terminal[j] else -1.0)
    initial_dist = np.zeros(S)
    for s in initial:
        initial_dist[index[s]] += 1.0
    initial_dist /= initial_dist.sum()
    return TabularMDP(states, index, A, P, R, terminal, float(gamma), initial_dist)


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Sup-norm fixed-point iteration on Q; returns the optimal Q table."""
    if not mdp.gamma < 1.0:
        raise ValueError("value iteration needs gamma < 1")
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        v = np.where(mdp.terminal, 0.0, Q.max(axis=1))
        Q_next = mdp.R + mdp.gamma * mdp.P @ v
        Q_next[mdp.terminal] = 0.0
        if np.max(np.abs(Q_next - Q)) < tol:
            return Q_next
        Q = Q_next
    raise RuntimeError("value iteration failed to converge")


def policy_q_evaluation(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Exact Q^pi via linear solve; ``policy`` is (S, A) row-stochastic."""
    S = mdp.n_states
    P_pi = np.einsum("sa,saj->sj", policy, mdp.P)
    R_pi = np.sum(policy * mdp.R, axis=1)
    live = ~mdp.terminal
    V = np.zeros(S)
    if live.any():
        M = np.eye(live.sum()) - mdp.gamma * P_pi[np.ix_(live, live)]
        V[live] = np.linalg.solve(M, R_pi[live])
    Q = mdp.R + mdp.gamma * mdp.P @ V
    Q[mdp.terminal] = 0.0
    return Q


def policy_v_evaluation(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    Q = policy_q_evaluation(mdp, policy)
    V = np.sum(policy * Q, axis=1)
    V[mdp.terminal] = 0.0
    return V


def mc_policy_eval(mdp: TabularMDP, policy: np.ndarray, n_rollouts: int,
                   rng: np.random.Generator, horizon: int = 600):
    """Monte-Carlo state-value estimates with standard errors.

    Runs ``n_rollouts`` truncated rollouts from every non-terminal state;
    returns ``(values, standard_errors)`` of the discounted return.
    """
    S = mdp.n_states
    values = np.zeros(S)
    errors = np.zeros(S)
    pol_cdf = np.cumsum(policy, axis=1)
    trans_cdf = np.cumsum(mdp.P, axis=2)
    for s0 in range(S):
        if mdp.terminal[s0]:
            continue
        returns = np.zeros(n_rollouts)
        state = np.full(n_rollouts, s0)
        discount = np.ones(n_rollouts)
        alive = np.ones(n_rollouts, dtype=bool)
        for _ in range(horizon):
            if not alive.any():
                break
            idx = np.flatnonzero(alive)
            s = state[idx]
            a = (rng.random(idx.size)[:, None] < pol_cdf[s]).argmax(axis=1)
            returns[idx] += discount[idx] * mdp.R[s, a]
            nxt = (rng.random(idx.size)[:, None] < trans_cdf[s, a]).argmax(axis=1)
            state[idx] = nxt
            discount[idx] *= mdp.gamma
            alive[idx] = ~mdp.terminal[nxt]
        values[s0] = returns.mean()
        errors[s0] = returns.std(ddof=1) / np.sqrt(n_rollouts) if n_rollouts > 1 else 0.0
    return values, errors


# --------------------------------------------------- steered policy, exact


def _selection_given_counts(counts: np.ndarray, q: np.ndarray, beta: float) -> np.ndarray:
    """Selection probabilities over actions given candidate multiset counts.

    beta = 0 is exact argmax with ties resolved by the lowest candidate index,
    which by exchangeability of iid draws reduces to count-proportional
    weights among the tied-maximum actions.
    """
    A = counts.size
    present = counts > 0
    sel = np.zeros(A)
    if beta == 0.0:
        m = np.max(q[present])
        tied = present & (q == m)
        sel[tied] = counts[tied] / counts[tied].sum()
    else:
        shifted = q - np.max(q[present])
        w = np.where(present, counts * np.exp(shifted / beta), 0.0)
        sel = w / w.sum()
    return sel


def steered_action_distribution(base_dist: np.ndarray, critic_table: np.ndarray,
                                K: int, beta: float) -> np.ndarray:
    """Exact per-state action distribution of re-ranked best-of-K selection.

    Enumerates multisets of K iid candidate draws per state; guarded against
    combinatorial blowups for large K on wide action spaces.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    S, A = base_dist.shape
    if K > 8 and A > 5:
        raise ValueError("multiset enumeration rejected for K > 8 with > 5 actions; "
                         "use Monte Carlo instead")
    if K == 1:
        return base_dist.copy()

    compositions = []
    for combo in combinations_with_replacement(range(A), K):
        counts = np.bincount(combo, minlength=A)
        coeff = factorial(K)
        for c in counts:
            coeff //= factorial(int(c))
        compositions.append((counts, coeff))

    out = np.zeros_like(base_dist)
    logp = np.log(np.maximum(base_dist, 1e-300))
    for s in range(S):
        q = critic_table[s]
        for counts, coeff in compositions:
            prob = coeff * np.exp(np.dot(counts, logp[s]))
            if prob < 1e-16:
                continue
            out[s] += prob * _selection_given_counts(counts, q, beta)
    # renormalize away the mass of skipped negligible multisets
    out /= out.sum(axis=1, keepdims=True)
    return out


def finite_horizon_success(mdp: TabularMDP, policy: np.ndarray, t_max: int) -> float:
    """Probability of absorbing into a success state within t_max steps,
    starting from the MDP's initial distribution."""
    succ = mdp.terminal.astype(np.float64)
    h = succ.copy()
    P_pi = np.einsum("sa,saj->sj", policy, mdp.P)
    for _ in range(t_max):
        h = np.where(mdp.terminal, 1.0, P_pi @ h)
    return float(mdp.initial_dist @ h)


def exact_steering_eval(mdp: TabularMDP, base_dist: np.ndarray, critic_table: np.ndarray,
                        K: int, beta: float, t_max: int = 60) -> dict:
    """Exact success probabilities of the baseline and the steered policy."""
    steered = steered_action_distribution(base_dist, critic_table, K, beta)
    return {
        "baseline": finite_horizon_success(mdp, base_dist, t_max),
        "steered": finite_horizon_success(mdp, steered, t_max),
        "steered_dist": steered,
    }


def mc_steering_success(mdp: TabularMDP, base_dist: np.ndarray, critic_table: np.ndarray,
                        K: int, beta: float, t_max: int, n_episodes: int,
                        rng: np.random.Generator):
    """Monte-Carlo estimate of steered success, vectorized across episodes.

    Replicates the selection rule exactly (argmax with first-candidate
    tie-breaking at beta = 0). Returns ``(estimate, standard_error)``.
    """
    cdf_init = np.cumsum(mdp.initial_dist)
    state = np.searchsorted(cdf_init, rng.random(n_episodes), side="right")
    trans_cdf = np.cumsum(mdp.P, axis=2)
    base_cdf = np.cumsum(base_dist, axis=1)
    done = mdp.terminal[state].copy()
    for _ in range(t_max):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        s = state[idx]
        u = rng.random((idx.size, K))
        candidates = (u[:, :, None] < base_cdf[s][:, None, :]).argmax(axis=2)  # (m, K)
        scores = critic_table[s[:, None], candidates]
        if beta == 0.0:
            pick = scores.argmax(axis=1)
        else:
            z = scores - scores.max(axis=1, keepdims=True)
            w = np.exp(z / beta)
            w /= w.sum(axis=1, keepdims=True)
            pick = (rng.random(idx.size)[:, None] < np.cumsum(w, axis=1)).argmax(axis=1)
        a = candidates[np.arange(idx.size), pick]
        nxt = (rng.random(idx.size)[:, None] < trans_cdf[s, a]).argmax(axis=1)
        state[idx] = nxt
        done[idx] = mdp.terminal[nxt]
    p = done.mean()
    se = np.sqrt(max(p * (1 - p), 1e-12) / n_episodes)
    return float(p), float(se)


def export_q_table(mdp: TabularMDP, Q: np.ndarray, path) -> None:
    """CSV dump (state_index, action, value) for audit."""
    with open(path, "w") as fh:
        fh.write("state_index,action,value\n")
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                fh.write(f"{s},{a},{Q[s, a]!r}\n")
