"""Test-time action re-ranking: sample K candidate actions from a frozen
policy, score them with a trained critic, and pick either the argmax
(temperature zero) or a softmax draw over scores.

The selection step is deliberately tiny and auditable; everything heavy
(policy sampling, critic batching) happens around it.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class NoViableCandidates(RuntimeError):
    """Every candidate score was non-finite; nothing can be selected."""


@dataclass
class SteeringConfig:
    num_candidates: int = 50      # K
    beta: float = 0.0             # softmax temperature; 0 means argmax
    seed: int = 0

    def validate(self) -> None:
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")


def selection_probs(q_values: np.ndarray, beta: float) -> np.ndarray:
    """Probability of picking each candidate given its score.

    beta == 0 puts all mass on the argmax (lowest index on exact ties);
    beta > 0 is a softmax over q / beta, computed with max subtraction so
    large scores cannot overflow. Non-finite scores get probability zero.
    """
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    q = np.asarray(q_values, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("q_values must be a non-empty 1-D array")
    finite = np.isfinite(q)
    if not finite.any():
        raise NoViableCandidates(f"all {q.size} candidate scores are non-finite")
    probs = np.zeros(q.size)
    if beta == 0.0:
        best = np.flatnonzero(finite & (q == q[finite].max()))[0]
        probs[best] = 1.0
        return probs
    shifted = np.where(finite, q - q[finite].max(), -np.inf)
    e = np.where(finite, np.exp(shifted / beta), 0.0)
    return e / e.sum()


def rerank_select(scores: np.ndarray, beta: float, rng: np.random.Generator):
    """Pick a candidate index from its scores; returns (index, probs)."""
    probs = selection_probs(scores, beta)
    if beta == 0.0:
        return int(np.argmax(probs)), probs
    return int(rng.choice(probs.size, p=probs)), probs


@dataclass
class EpisodeResult:
    success: bool
    steps_taken: int
    chosen_q: list = field(default_factory=list)     # selected score per decision
    decision_seconds: list = field(default_factory=list)
    dropped_candidates: int = 0                      # non-finite scores skipped
    invalid: bool = False                            # episode aborted


def steer_episode(env, policy, scorer, task, config: SteeringConfig,
                  rng: np.random.Generator, t_max: int = 60) -> EpisodeResult:
    """Roll out one episode with critic-steered action selection.

    At each step the frozen ``policy`` proposes ``config.num_candidates``
    actions, ``scorer(state, actions, task)`` evaluates them in one batched
    call, and one is selected by :func:`rerank_select`. The environment
    interface is the same as for plain rollouts.
    """
    config.validate()
    state = env.reset(task, rng)
    result = EpisodeResult(success=False, steps_taken=0)
    for _ in range(t_max):
        t0 = time.perf_counter()
        candidates = np.asarray(policy.sample(state, task, config.num_candidates, rng))
        scores = np.asarray(scorer(state, candidates, task), dtype=np.float64)
        if scores.shape != (len(candidates),):
            raise ValueError(
                f"scorer returned shape {scores.shape} for {len(candidates)} candidates")
        n_bad = int((~np.isfinite(scores)).sum())
        if n_bad:
            result.dropped_candidates += n_bad
            log.warning("dropped %d non-finite candidate scores", n_bad)
        try:
            idx, _ = rerank_select(scores, config.beta, rng)
        except NoViableCandidates:
            result.invalid = True
            return result
        result.decision_seconds.append(time.perf_counter() - t0)
        result.chosen_q.append(float(scores[idx]))
        state, _, _ = env.step(state, candidates[idx], rng, task)
        result.steps_taken += 1
        if env.success(state, task):
            result.success = True
            break
    return result


def run_policy_episode(env, policy, task, rng: np.random.Generator,
                       t_max: int = 60) -> EpisodeResult:
    """Unsteered baseline rollout with the same bookkeeping as steering.

    Equivalent to steering with a single candidate, minus the scoring call.
    """
    state = env.reset(task, rng)
    result = EpisodeResult(success=False, steps_taken=0)
    for _ in range(t_max):
        action = np.asarray(policy.sample(state, task, 1, rng))[0]
        state, _, _ = env.step(state, action, rng, task)
        result.steps_taken += 1
        if env.success(state, task):
            result.success = True
            break
    return result
