"""Offline RL on top of the dense-net stack: conservative critic losses with
a return-to-go calibration floor, expectile-regressed state values, SARSA,
behavior cloning, discrete and tanh-squashed Gaussian actors, clipped double
Q targets, and the sequential training loop.

All gradients are assembled by hand from the nets' reverse-mode passes; the
loss functions double as frozen-network evaluators so their algebra can be
checked independently of training.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import Dataset, TransitionBatch
from .nets import (
    DenseNet,
    adam_init,
    adam_step,
    load_checkpoint,
    make_task_embeddings,
    polyak_update,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("calql", "cql", "iql", "sarsa", "bc")


class TrainingDiverged(RuntimeError):
    """Non-finite loss or target; carries the last-good artifacts."""

    def __init__(self, message, artifacts=None):
        super().__init__(message)
        self.artifacts = artifacts


class DegenerateWeights(RuntimeError):
    """All advantage-weighted-regression weights underflowed to zero."""


@dataclass
class TrainConfig:
    algorithm: str = "calql"
    alpha: float = 5.0                 # conservative weight
    expectile: float = 0.7
    gamma: float = 0.98
    learning_rate: float = 3e-4
    batch_size: int = 256
    total_steps: int = 15_000
    target_polyak_rate: float = 5e-3
    num_policy_samples: int = 4        # actor samples for the continuous regularizer
    hidden_dims: tuple = (64, 64)
    embed_dim: int = 16
    awr_temperature: float = 1.0
    awr_weight_clip: float = 100.0
    entropy_bonus: float = 0.01
    log_std_bounds: tuple = (-5.0, 2.0)
    train_actor: bool = True
    log_every: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        if not (0.0 < self.expectile < 1.0):
            raise ValueError("expectile must lie in (0, 1)")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.num_policy_samples < 1:
            raise ValueError("num_policy_samples must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["log_std_bounds"] = list(self.log_std_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        d["log_std_bounds"] = tuple(d["log_std_bounds"])
        return cls(**d)


# ------------------------------------------------------------ action spaces


class ActionCodec:
    """Encodes env actions into critic-input vectors (one-hot or raw box)."""

    def __init__(self, action_space: dict):
        self.space = dict(action_space)
        self.discrete = action_space["type"] == "discrete"
        if self.discrete:
            self.n_actions = int(action_space["n"])
            self.input_dim = self.n_actions
        else:
            self.low = np.asarray(action_space["low"], dtype=np.float64)
            self.high = np.asarray(action_space["high"], dtype=np.float64)
            self.input_dim = int(action_space["dim"])

    def encode(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions)
        if self.discrete:
            return np.eye(self.n_actions)[actions.astype(np.int64)]
        return actions.reshape(-1, self.input_dim).astype(np.float64)

    def uniform_random(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.discrete:
            return rng.integers(0, self.n_actions, size=count)
        return rng.uniform(self.low, self.high, size=(count, self.input_dim))


# ---------------------------------------------------------------- networks


class CriticPair:
    """Two online critics with delayed target copies (clipped double Q)."""

    def __init__(self, obs_dim: int, act_input_dim: int, embed_dim: int,
                 hidden_dims: tuple, seed: int):
        in_dim = obs_dim + act_input_dim
        self.q1 = DenseNet(in_dim, hidden_dims, 1, embed_dim=embed_dim, seed=seed)
        self.q2 = DenseNet(in_dim, hidden_dims, 1, embed_dim=embed_dim, seed=seed + 1)
        self.target1 = self.q1.clone()
        self.target2 = self.q2.clone()

    @staticmethod
    def _q(net: DenseNet, obs: np.ndarray, act_enc: np.ndarray,
           emb: np.ndarray) -> np.ndarray:
        x = np.concatenate([obs, act_enc], axis=1)
        return net.forward(x, emb).ravel()

    def min_online(self, obs, act_enc, emb) -> np.ndarray:
        return np.minimum(self._q(self.q1, obs, act_enc, emb),
                          self._q(self.q2, obs, act_enc, emb))

    def min_target(self, obs, act_enc, emb) -> np.ndarray:
        return np.minimum(self._q(self.target1, obs, act_enc, emb),
                          self._q(self.target2, obs, act_enc, emb))

    def all_action_values(self, nets, obs: np.ndarray, emb: np.ndarray,
                          n_actions: int) -> np.ndarray:
        """Q over every discrete action; returns (B, A) per net, min-reduced."""
        B = obs.shape[0]
        obs_rep = np.repeat(obs, n_actions, axis=0)
        emb_rep = np.repeat(emb, n_actions, axis=0)
        act_rep = np.tile(np.eye(n_actions), (B, 1))
        out = None
        for net in nets:
            q = self._q(net, obs_rep, act_rep, emb_rep).reshape(B, n_actions)
            out = q if out is None else np.minimum(out, q)
        return out

    def polyak(self, rate: float) -> None:
        self.target1.set_params(polyak_update(self.target1.get_params(),
                                              self.q1.get_params(), rate))
        self.target2.set_params(polyak_update(self.target2.get_params(),
                                              self.q2.get_params(), rate))


def _soft_clamp_log_std(raw: np.ndarray, bounds: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Smooth clamp of raw log-std into bounds; returns (value, d value/d raw)."""
    lo, hi = bounds
    t = np.tanh(raw)
    value = lo + 0.5 * (hi - lo) * (t + 1.0)
    grad = 0.5 * (hi - lo) * (1.0 - t * t)
    return value, grad


class GaussianActor:
    """Tanh-squashed Gaussian policy over a box action space."""

    def __init__(self, obs_dim: int, act_dim: int, low, high, embed_dim: int,
                 hidden_dims: tuple, seed: int, log_std_bounds=(-5.0, 2.0)):
        self.net = DenseNet(obs_dim, hidden_dims, 2 * act_dim, embed_dim=embed_dim, seed=seed)
        self.act_dim = act_dim
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.scale = 0.5 * (self.high - self.low)
        self.log_std_bounds = tuple(log_std_bounds)

    def dist_params(self, obs, emb):
        out = self.net.forward(obs, emb)
        out = np.atleast_2d(out)
        mu = out[:, : self.act_dim]
        log_std, _ = _soft_clamp_log_std(out[:, self.act_dim :], self.log_std_bounds)
        return mu, log_std

    def squash(self, u: np.ndarray) -> np.ndarray:
        return self.low + self.scale * (np.tanh(u) + 1.0)

    def unsquash(self, a: np.ndarray) -> np.ndarray:
        z = np.clip((a - self.low) / self.scale - 1.0, -1.0 + 1e-9, 1.0 - 1e-9)
        return np.arctanh(z)

    def sample(self, obs, emb, rng: np.random.Generator) -> np.ndarray:
        mu, log_std = self.dist_params(obs, emb)
        u = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        return self.squash(u)

    def log_prob_of_u(self, u, mu, log_std) -> np.ndarray:
        std = np.exp(log_std)
        base = -0.5 * ((u - mu) / std) ** 2 - log_std - 0.5 * np.log(2 * np.pi)
        # log(1 - tanh(u)^2) written in a form that stays finite for large |u|.
        log_one_minus_tanh_sq = 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
        jac = np.log(self.scale) + log_one_minus_tanh_sq
        return np.sum(base - jac, axis=1)


class DiscreteActor:
    """Categorical policy from logits."""

    def __init__(self, obs_dim: int, n_actions: int, embed_dim: int,
                 hidden_dims: tuple, seed: int):
        self.net = DenseNet(obs_dim, hidden_dims, n_actions, embed_dim=embed_dim, seed=seed)
        self.n_actions = n_actions

    def logits(self, obs, emb) -> np.ndarray:
        return np.atleast_2d(self.net.forward(obs, emb))

    def probs(self, obs, emb) -> np.ndarray:
        return softmax_rows(self.logits(obs, emb))

    def sample(self, obs, emb, rng: np.random.Generator) -> np.ndarray:
        p = self.probs(obs, emb)
        cdf = np.cumsum(p, axis=1)
        return (rng.random(p.shape[0])[:, None] < cdf).argmax(axis=1)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------- losses


def expectile_loss(u, tau: float):
    """Asymmetric squared loss: tau * u^2 above zero, (1 - tau) * u^2 below."""
    if not (0.0 < tau < 1.0):
        raise ValueError("expectile must lie in (0, 1)")
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u >= 0.0, tau, 1.0 - tau)
    return w * u * u


def bellman_target(batch: TransitionBatch, critics: CriticPair, codec: ActionCodec,
                   emb_table: np.ndarray, gamma: float,
                   actor: GaussianActor | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Clipped double-Q backup target.

    Discrete: greedy argmax of the min-target over all actions. Continuous:
    the successor action is sampled from the actor.
    """
    emb = emb_table[batch.task_id]
    if codec.discrete:
        q_next = critics.all_action_values((critics.target1, critics.target2),
                                           batch.next_state, emb, codec.n_actions)
        boot = q_next.max(axis=1)
    else:
        if actor is None or rng is None:
            raise ValueError("continuous backup needs an actor and rng")
        a_next = actor.sample(batch.next_state, emb, rng)
        boot = critics.min_target(batch.next_state, codec.encode(a_next), emb)
    target = batch.reward + gamma * (1.0 - batch.terminal.astype(np.float64)) * boot
    if not np.all(np.isfinite(target)):
        raise TrainingDiverged("non-finite Bellman target")
    return target


@dataclass
class CriticLossOut:
    loss: float
    td_loss: float
    regularizer: float
    grads: dict = field(default_factory=dict)    # net name -> flat gradient
    mean_dataset_q: float = 0.0
    mean_policy_q: float = 0.0


def _conservative_loss_one(net: DenseNet, obs, act_enc, emb, target, q_mu,
                           alpha: float, calibrate: bool, codec: ActionCodec,
                           policy_actions: np.ndarray | None) -> tuple:
    """Loss, gradient, and diagnostics of Eq.-style conservative objective for
    a single critic. The push-down expectation is exact over the softmax of Q
    in the discrete case and Monte Carlo over actor samples otherwise."""
    B = obs.shape[0]
    x_data = np.concatenate([obs, act_enc], axis=1)
    q_data_out, cache_data = net.forward_cache(x_data, emb)
    q_data = q_data_out.ravel()
    td_resid = q_data - target
    td_loss = 0.5 * float(np.mean(td_resid**2))

    if alpha == 0.0:
        grad, _ = net.backward(cache_data, (td_resid / B)[:, None])
        return td_loss, td_loss, 0.0, grad, float(q_data.mean()), float("nan")

    if codec.discrete:
        A = codec.n_actions
        obs_rep = np.repeat(obs, A, axis=0)
        emb_rep = np.repeat(emb, A, axis=0)
        act_rep = np.tile(np.eye(A), (B, 1))
        x_pi = np.concatenate([obs_rep, act_rep], axis=1)
        q_pi_out, cache_pi = net.forward_cache(x_pi, emb_rep)
        q_pi = q_pi_out.reshape(B, A)
        weights = softmax_rows(q_pi)                       # stop-gradient
        floor = q_mu[:, None]
    else:
        M = policy_actions.shape[1]
        obs_rep = np.repeat(obs, M, axis=0)
        emb_rep = np.repeat(emb, M, axis=0)
        act_pi = codec.encode(policy_actions.reshape(B * M, -1))
        x_pi = np.concatenate([obs_rep, act_pi], axis=1)
        q_pi_out, cache_pi = net.forward_cache(x_pi, emb_rep)
        q_pi = q_pi_out.reshape(B, M)
        weights = np.full((B, M), 1.0 / M)
        floor = q_mu[:, None]

    if calibrate:
        vals = np.maximum(q_pi, floor)
        active = (q_pi > floor).astype(np.float64)
    else:
        vals = q_pi
        active = np.ones_like(q_pi)
    push_down = float(np.sum(weights * vals) / B)
    push_up = float(q_data.mean())
    regularizer = push_down - push_up
    loss = alpha * regularizer + td_loss

    up_data = (td_resid / B - alpha / B)[:, None]
    grad, _ = net.backward(cache_data, up_data)
    up_pi = (alpha * weights * active / B).reshape(-1, 1)
    grad_pi, _ = net.backward(cache_pi, up_pi)
    grad = grad + grad_pi
    return loss, td_loss, regularizer, grad, push_up, float(np.sum(weights * q_pi) / B)


def conservative_critic_loss(batch: TransitionBatch, critics: CriticPair,
                             codec: ActionCodec, emb_table: np.ndarray,
                             target: np.ndarray, alpha: float, calibrate: bool,
                             policy_actions: np.ndarray | None = None) -> CriticLossOut:
    """Conservative critic objective summed over both critics.

    ``calibrate=True`` floors the push-down values at the stored
    return-to-go reference (the behavior policy's Monte-Carlo return);
    ``calibrate=False`` is the plain conservative regularizer.
    """
    if alpha < 0.0:
        raise ValueError("alpha must be >= 0")
    emb = emb_table[batch.task_id]
    act_enc = codec.encode(batch.action)
    total = CriticLossOut(0.0, 0.0, 0.0)
    qs, pis = [], []
    for name, net in (("q1", critics.q1), ("q2", critics.q2)):
        loss, td, reg, grad, mq, mpi = _conservative_loss_one(
            net, batch.state, act_enc, emb, target, batch.return_to_go,
            alpha, calibrate, codec, policy_actions)
        total.loss += loss
        total.td_loss += td
        total.regularizer += reg
        total.grads[name] = grad
        qs.append(mq)
        pis.append(mpi)
    total.mean_dataset_q = float(np.mean(qs))
    total.mean_policy_q = float(np.mean(pis))
    return total


def calql_critic_loss(batch, critics, codec, emb_table, target, alpha,
                      policy_actions=None) -> CriticLossOut:
    return conservative_critic_loss(batch, critics, codec, emb_table, target,
                                    alpha, calibrate=True, policy_actions=policy_actions)


def cql_critic_loss(batch, critics, codec, emb_table, target, alpha,
                    policy_actions=None) -> CriticLossOut:
    return conservative_critic_loss(batch, critics, codec, emb_table, target,
                                    alpha, calibrate=False, policy_actions=policy_actions)


def iql_losses(batch: TransitionBatch, critics: CriticPair, valuenet: DenseNet,
               codec: ActionCodec, emb_table: np.ndarray, tau: float,
               gamma: float) -> tuple[float, float, dict]:
    """Expectile value loss and Q regression loss; returns (v_loss, q_loss, grads)."""
    if not (0.0 < tau < 1.0):
        raise ValueError("expectile must lie in (0, 1)")
    emb = emb_table[batch.task_id]
    act_enc = codec.encode(batch.action)
    B = len(batch)
    grads: dict = {}

    q_ref = critics.min_target(batch.state, act_enc, emb)
    v_out, v_cache = valuenet.forward_cache(batch.state, emb)
    v = v_out.ravel()
    u = q_ref - v
    w = np.where(u >= 0.0, tau, 1.0 - tau)
    v_loss = float(np.mean(w * u * u))
    grads["v"], _ = valuenet.backward(v_cache, (-2.0 * w * u / B)[:, None])

    v_next = valuenet.forward(batch.next_state, emb).ravel()
    y = batch.reward + gamma * (1.0 - batch.terminal.astype(np.float64)) * v_next
    q_loss = 0.0
    for name, net in (("q1", critics.q1), ("q2", critics.q2)):
        x = np.concatenate([batch.state, act_enc], axis=1)
        q_out, cache = net.forward_cache(x, emb)
        resid = q_out.ravel() - y
        q_loss += float(np.mean(resid**2))
        grads[name], _ = net.backward(cache, (2.0 * resid / B)[:, None])
    return v_loss, q_loss, grads


def sarsa_loss(batch: TransitionBatch, critics: CriticPair, codec: ActionCodec,
               emb_table: np.ndarray, gamma: float) -> tuple[float, dict]:
    """TD error against the dataset successor action (behavior-policy backup)."""
    emb = emb_table[batch.task_id]
    act_enc = codec.encode(batch.action)
    next_enc = codec.encode(batch.next_action)
    boot = critics.min_target(batch.next_state, next_enc, emb)
    y = batch.reward + gamma * (1.0 - batch.terminal.astype(np.float64)) * boot
    B = len(batch)
    loss = 0.0
    grads: dict = {}
    for name, net in (("q1", critics.q1), ("q2", critics.q2)):
        x = np.concatenate([batch.state, act_enc], axis=1)
        q_out, cache = net.forward_cache(x, emb)
        resid = q_out.ravel() - y
        loss += float(np.mean(resid**2))
        grads[name], _ = net.backward(cache, (2.0 * resid / B)[:, None])
    return loss, grads


def bc_loss(batch: TransitionBatch, actor, codec: ActionCodec,
            emb_table: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of dataset actions; returns (loss, actor grad)."""
    emb = emb_table[batch.task_id]
    B = len(batch)
    if codec.discrete:
        logits_out, cache = actor.net.forward_cache(batch.state, emb)
        p = softmax_rows(logits_out)
        a = batch.action.astype(np.int64)
        nll = -np.log(np.maximum(p[np.arange(B), a], 1e-300))
        grad_logits = p.copy()
        grad_logits[np.arange(B), a] -= 1.0
        grad, _ = actor.net.backward(cache, grad_logits / B)
        return float(nll.mean()), grad
    return _gaussian_nll_and_grad(batch.state, batch.action, emb, actor,
                                  np.ones(B) / B)


def _gaussian_nll_and_grad(obs, actions, emb, actor: GaussianActor,
                           sample_weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted NLL of box actions under the tanh-squashed Gaussian."""
    out, cache = actor.net.forward_cache(obs, emb)
    out = np.atleast_2d(out)
    d = actor.act_dim
    mu = out[:, :d]
    raw = out[:, d:]
    log_std, dls_draw = _soft_clamp_log_std(raw, actor.log_std_bounds)
    u = actor.unsquash(np.asarray(actions, dtype=np.float64).reshape(-1, d))
    logp = actor.log_prob_of_u(u, mu, log_std)
    loss = float(np.sum(sample_weights * (-logp)))
    std = np.exp(log_std)
    z = (u - mu) / std
    d_mu = -z / std                          # d(-logp)/d mu
    d_log_std = 1.0 - z * z                  # d(-logp)/d log_std
    upstream = np.concatenate(
        [d_mu * sample_weights[:, None], d_log_std * dls_draw * sample_weights[:, None]],
        axis=1)
    grad, _ = actor.net.backward(cache, upstream)
    return loss, grad


def calql_actor_loss_discrete(batch: TransitionBatch, critics: CriticPair,
                              actor: DiscreteActor, emb_table: np.ndarray,
                              entropy_bonus: float) -> tuple[float, np.ndarray]:
    """Maximize the expected min-Q under the categorical actor, plus an
    entropy bonus. Q is treated as frozen."""
    emb = emb_table[batch.task_id]
    B = len(batch)
    q = critics.all_action_values((critics.q1, critics.q2), batch.state, emb,
                                  actor.n_actions)
    logits_out, cache = actor.net.forward_cache(batch.state, emb)
    p = softmax_rows(logits_out)
    logp = np.log(np.maximum(p, 1e-300))
    exp_q = np.sum(p * q, axis=1)
    entropy = -np.sum(p * logp, axis=1)
    loss = float(np.mean(-exp_q - entropy_bonus * entropy))
    # d/d logits of -sum(p*q):  -p * (q - E_p[q]);  of -H: p * (logp + H)
    g = -p * (q - exp_q[:, None]) + entropy_bonus * p * (logp + entropy[:, None])
    grad, _ = actor.net.backward(cache, g / B)
    return loss, grad


def calql_actor_loss_continuous(batch: TransitionBatch, critics: CriticPair,
                                actor: GaussianActor, codec: ActionCodec,
                                emb_table: np.ndarray, entropy_bonus: float,
                                rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Reparameterized actor objective: minimize E[entropy_bonus * log pi - min Q]."""
    emb = emb_table[batch.task_id]
    B = len(batch)
    out, cache = actor.net.forward_cache(batch.state, emb)
    out = np.atleast_2d(out)
    d = actor.act_dim
    mu = out[:, :d]
    raw = out[:, d:]
    log_std, dls_draw = _soft_clamp_log_std(raw, actor.log_std_bounds)
    std = np.exp(log_std)
    eps = rng.standard_normal(mu.shape)
    u = mu + std * eps
    t = np.tanh(u)
    a = actor.low + actor.scale * (t + 1.0)
    act_enc = codec.encode(a)
    x = np.concatenate([batch.state, act_enc], axis=1)
    q1_out, c1 = critics.q1.forward_cache(x, emb)
    q2_out, c2 = critics.q2.forward_cache(x, emb)
    q1v, q2v = q1_out.ravel(), q2_out.ravel()
    use1 = q1v <= q2v
    q = np.where(use1, q1v, q2v)
    logp = actor.log_prob_of_u(u, mu, log_std)
    loss = float(np.mean(entropy_bonus * logp - q))

    # dq/da through whichever critic attains the min
    _, dx1 = critics.q1.backward(c1, (use1.astype(np.float64) / B)[:, None])
    _, dx2 = critics.q2.backward(c2, ((~use1).astype(np.float64) / B)[:, None])
    dq_da = (dx1 + dx2)[:, batch.state.shape[1]:]          # (B, d), includes 1/B
    da_du = actor.scale * (1.0 - t * t)
    # loss = mean(entropy_bonus * logp) - mean(q), with u = mu + std * eps:
    #   d logp / d mu      = 2 * tanh(u)            (base term vanishes, eps fixed)
    #   d logp / d log_std = -1 + 2 * tanh(u) * std * eps
    d_mu = entropy_bonus * (2.0 * t) / B - dq_da * da_du
    d_ls = entropy_bonus * (-1.0 + 2.0 * t * std * eps) / B - dq_da * da_du * std * eps
    upstream = np.concatenate([d_mu, d_ls * dls_draw], axis=1)
    grad, _ = actor.net.backward(cache, upstream)
    return loss, grad


def awr_actor_loss(batch: TransitionBatch, critics: CriticPair, valuenet: DenseNet,
                   actor, codec: ActionCodec, emb_table: np.ndarray,
                   temperature: float, weight_clip: float) -> tuple[float, np.ndarray]:
    """Advantage-weighted regression onto dataset actions."""
    emb = emb_table[batch.task_id]
    B = len(batch)
    act_enc = codec.encode(batch.action)
    adv = critics.min_target(batch.state, act_enc, emb) - valuenet.forward(batch.state, emb).ravel()
    weights = np.minimum(np.exp(adv / temperature), weight_clip)
    if np.all(weights == 0.0):
        raise DegenerateWeights(
            f"all AWR weights underflowed (advantage range [{adv.min():.3g}, {adv.max():.3g}])")
    if codec.discrete:
        logits_out, cache = actor.net.forward_cache(batch.state, emb)
        p = softmax_rows(logits_out)
        a = batch.action.astype(np.int64)
        nll = -np.log(np.maximum(p[np.arange(B), a], 1e-300))
        loss = float(np.mean(weights * nll))
        g = p.copy()
        g[np.arange(B), a] -= 1.0
        grad, _ = actor.net.backward(cache, g * weights[:, None] / B)
        return loss, grad
    return _gaussian_nll_and_grad(batch.state, batch.action, emb, actor, weights / B)


# ---------------------------------------------------------------- training


@dataclass
class TrainedArtifacts:
    algorithm: str
    config: TrainConfig
    embeddings: np.ndarray
    action_space: dict
    obs_dim: int
    critics: CriticPair | None = None
    valuenet: DenseNet | None = None
    actor: object | None = None
    curve: list = field(default_factory=list)

    def save(self, path_prefix) -> None:
        nets = {}
        if self.critics is not None:
            nets.update(q1=self.critics.q1, q2=self.critics.q2,
                        target1=self.critics.target1, target2=self.critics.target2)
        if self.valuenet is not None:
            nets["v"] = self.valuenet
        if self.actor is not None:
            nets["actor"] = self.actor.net
        meta = {
            "algorithm": self.algorithm,
            "train_config": self.config.to_dict(),
            "action_space": self.action_space,
            "obs_dim": self.obs_dim,
        }
        save_checkpoint(f"{path_prefix}.ckpt.npz", nets, self.embeddings, meta)
        if self.curve:
            cols = list(self.curve[0])
            with open(f"{path_prefix}.curve.csv", "w") as fh:
                fh.write(",".join(cols) + "\n")
                for row in self.curve:
                    fh.write(",".join(repr(row[c]) for c in cols) + "\n")

    @classmethod
    def load(cls, path_prefix) -> "TrainedArtifacts":
        nets, embeddings, meta = load_checkpoint(f"{path_prefix}.ckpt.npz")
        config = TrainConfig.from_dict(meta["train_config"])
        codec = ActionCodec(meta["action_space"])
        art = cls(algorithm=meta["algorithm"], config=config, embeddings=embeddings,
                  action_space=meta["action_space"], obs_dim=meta["obs_dim"])
        if "q1" in nets:
            pair = CriticPair.__new__(CriticPair)
            pair.q1, pair.q2 = nets["q1"], nets["q2"]
            pair.target1, pair.target2 = nets["target1"], nets["target2"]
            art.critics = pair
        if "v" in nets:
            art.valuenet = nets["v"]
        if "actor" in nets:
            if codec.discrete:
                actor = DiscreteActor.__new__(DiscreteActor)
                actor.net = nets["actor"]
                actor.n_actions = codec.n_actions
            else:
                actor = GaussianActor.__new__(GaussianActor)
                actor.net = nets["actor"]
                actor.act_dim = codec.input_dim
                actor.low, actor.high = codec.low, codec.high
                actor.scale = 0.5 * (codec.high - codec.low)
                actor.log_std_bounds = tuple(config.log_std_bounds)
            art.actor = actor
        return art


def train(dataset: Dataset, config: TrainConfig) -> TrainedArtifacts:
    """Run the full offline training loop; deterministic given the seed."""
    config.validate()
    if dataset.n_transitions == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    codec = ActionCodec(dataset.manifest.action_space)
    obs_dim = dataset.manifest.obs_dim
    n_tasks = len(dataset.manifest.task_table)
    emb_table = make_task_embeddings(n_tasks, config.embed_dim, seed=config.seed)

    algo = config.algorithm
    needs_critics = algo in ("calql", "cql", "iql", "sarsa")
    needs_value = algo == "iql"
    needs_actor = (algo == "bc"
                   or (algo in ("calql", "cql", "iql") and config.train_actor)
                   or (algo in ("calql", "cql") and not codec.discrete))

    critics = CriticPair(obs_dim, codec.input_dim, config.embed_dim,
                         config.hidden_dims, seed=config.seed + 10) if needs_critics else None
    valuenet = DenseNet(obs_dim, config.hidden_dims, 1, embed_dim=config.embed_dim,
                        seed=config.seed + 20) if needs_value else None
    actor = None
    if needs_actor:
        if codec.discrete:
            actor = DiscreteActor(obs_dim, codec.n_actions, config.embed_dim,
                                  config.hidden_dims, seed=config.seed + 30)
        else:
            actor = GaussianActor(obs_dim, codec.input_dim, codec.low, codec.high,
                                  config.embed_dim, config.hidden_dims,
                                  seed=config.seed + 30,
                                  log_std_bounds=config.log_std_bounds)

    artifacts = TrainedArtifacts(
        algorithm=algo, config=config, embeddings=emb_table,
        action_space=dataset.manifest.action_space, obs_dim=obs_dim,
        critics=critics, valuenet=valuenet, actor=actor)

    opt: dict[str, object] = {}
    params: dict[str, np.ndarray] = {}

    def register(name, net):
        params[name] = net.get_params()
        opt[name] = adam_init(net.n_params, learning_rate=config.learning_rate)

    if critics is not None:
        register("q1", critics.q1)
        register("q2", critics.q2)
    if valuenet is not None:
        register("v", valuenet)
    if actor is not None:
        register("actor", actor.net)

    nets_by_name = {}
    if critics is not None:
        nets_by_name.update(q1=critics.q1, q2=critics.q2)
    if valuenet is not None:
        nets_by_name["v"] = valuenet
    if actor is not None:
        nets_by_name["actor"] = actor.net

    def apply(name, grad):
        params[name] = adam_step(opt[name], params[name], grad)
        nets_by_name[name].set_params(params[name])

    for step in range(config.total_steps):
        batch = dataset.sample_batch(config.batch_size, rng)
        emb = emb_table[batch.task_id]
        metrics = {"step": step, "td_loss": np.nan, "regularizer": np.nan,
                   "v_loss": np.nan, "actor_loss": np.nan}
        try:
            if algo in ("calql", "cql"):
                target = bellman_target(batch, critics, codec, emb_table,
                                        config.gamma, actor=actor, rng=rng)
                policy_actions = None
                if not codec.discrete:
                    policy_actions = np.stack(
                        [actor.sample(batch.state, emb, rng)
                         for _ in range(config.num_policy_samples)], axis=1)
                out = conservative_critic_loss(
                    batch, critics, codec, emb_table, target, config.alpha,
                    calibrate=(algo == "calql"), policy_actions=policy_actions)
                if not np.isfinite(out.loss):
                    raise TrainingDiverged(f"non-finite critic loss at step {step}",
                                           artifacts)
                apply("q1", out.grads["q1"])
                apply("q2", out.grads["q2"])
                metrics.update(td_loss=out.td_loss, regularizer=out.regularizer,
                               mean_dataset_q=out.mean_dataset_q)
                if actor is not None:
                    if codec.discrete:
                        a_loss, a_grad = calql_actor_loss_discrete(
                            batch, critics, actor, emb_table, config.entropy_bonus)
                    else:
                        a_loss, a_grad = calql_actor_loss_continuous(
                            batch, critics, actor, codec, emb_table,
                            config.entropy_bonus, rng)
                    apply("actor", a_grad)
                    metrics["actor_loss"] = a_loss
            elif algo == "iql":
                v_loss, q_loss, grads = iql_losses(batch, critics, valuenet, codec,
                                                   emb_table, config.expectile,
                                                   config.gamma)
                if not (np.isfinite(v_loss) and np.isfinite(q_loss)):
                    raise TrainingDiverged(f"non-finite IQL loss at step {step}", artifacts)
                apply("v", grads["v"])
                apply("q1", grads["q1"])
                apply("q2", grads["q2"])
                metrics.update(td_loss=q_loss, v_loss=v_loss, regularizer=0.0)
                if actor is not None:
                    a_loss, a_grad = awr_actor_loss(
                        batch, critics, valuenet, actor, codec, emb_table,
                        config.awr_temperature, config.awr_weight_clip)
                    apply("actor", a_grad)
                    metrics["actor_loss"] = a_loss
            elif algo == "sarsa":
                loss, grads = sarsa_loss(batch, critics, codec, emb_table, config.gamma)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite SARSA loss at step {step}", artifacts)
                apply("q1", grads["q1"])
                apply("q2", grads["q2"])
                metrics.update(td_loss=loss, regularizer=0.0)
            elif algo == "bc":
                loss, grad = bc_loss(batch, actor, codec, emb_table)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite BC loss at step {step}", artifacts)
                apply("actor", grad)
                metrics.update(actor_loss=loss)
        except TrainingDiverged as exc:
            exc.artifacts = artifacts
            log.error("training halted: %s", exc)
            raise

        if critics is not None:
            critics.polyak(config.target_polyak_rate)

        if step % config.log_every == 0 or step == config.total_steps - 1:
            metrics.update(_q_diagnostics(dataset, critics, codec, emb_table, rng,
                                          batch))
            artifacts.curve.append(metrics)
    return artifacts


def _q_diagnostics(dataset, critics, codec, emb_table, rng, batch) -> dict:
    """Mean Q on dataset actions vs. uniformly random actions."""
    if critics is None:
        return {"mean_dataset_q": np.nan, "mean_ood_q": np.nan}
    emb = emb_table[batch.task_id]
    q_data = critics.min_online(batch.state, codec.encode(batch.action), emb)
    random_actions = codec.uniform_random(len(batch), rng)
    q_ood = critics.min_online(batch.state, codec.encode(random_actions), emb)
    return {"mean_dataset_q": float(q_data.mean()), "mean_ood_q": float(q_ood.mean())}


# ----------------------------------------------------- deployment wrappers


class ActorPolicy:
    """Wraps a trained actor as a frozen sampling policy over env states."""

    def __init__(self, actor, embeddings: np.ndarray, observe):
        self.actor = actor
        self.embeddings = embeddings
        self.observe = observe

    def sample(self, state, task_id: int, count: int, rng: np.random.Generator):
        obs = np.tile(self.observe(state), (count, 1))
        emb = np.tile(self.embeddings[task_id], (count, 1))
        return self.actor.sample(obs, emb, rng)


class CriticScorer:
    """Scores candidate actions with the min of the online critics."""

    def __init__(self, critics: CriticPair, embeddings: np.ndarray,
                 action_space: dict, observe):
        self.critics = critics
        self.embeddings = embeddings
        self.codec = ActionCodec(action_space)
        self.observe = observe

    def __call__(self, state, actions, task_id: int) -> np.ndarray:
        actions = np.asarray(actions)
        count = actions.shape[0]
        obs = np.tile(self.observe(state), (count, 1))
        emb = np.tile(self.embeddings[task_id], (count, 1))
        return self.critics.min_online(obs, self.codec.encode(actions), emb)
