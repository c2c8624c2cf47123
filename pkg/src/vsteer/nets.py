"""Minimal dense-network stack: exact reverse-mode gradients, FiLM conditioning,
Adam, polyak target updates, and a versioned checkpoint container.

Everything runs in float64 on numpy. Networks are plain parameter holders;
forward/backward are explicit so gradients can be checked against finite
differences without any framework in the way.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input/parameter dimension mismatch, naming the offending layer."""


class CheckpointError(RuntimeError):
    """Bad magic, wrong version, or malformed checkpoint contents."""


_CKPT_MAGIC = "vsteer-ckpt"
_CKPT_VERSION = 1


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    # derivative w.r.t. pre-activation, evaluated at z
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "linear":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


class DenseNet:
    """MLP with optional FiLM conditioning on every hidden layer.

    Hidden layer i computes ``h = W_i x + b_i``; when an embedding dimension is
    configured, a per-layer affine map of the task embedding produces
    ``(scale, shift)`` and the pre-activation becomes ``scale * h + shift``
    before the nonlinearity. The FiLM affines are initialized so that the
    modulation starts as the identity (scale 1, shift 0). The output layer is
    linear and unconditioned.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dims: tuple[int, ...],
        output_dim: int,
        embed_dim: int | None = None,
        activation: str = "relu",
        seed: int = 0,
    ):
        if input_dim < 1 or output_dim < 1:
            raise ShapeError("input_dim and output_dim must be positive")
        _activate(activation, np.zeros(1))  # validate name
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.output_dim = int(output_dim)
        self.embed_dim = None if embed_dim is None else int(embed_dim)
        self.activation = activation

        rng = np.random.default_rng(seed)
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            # He fan-in scaling on hidden layers, smaller variance on the head
            scale = np.sqrt(2.0 / fan_in) if i < len(dims) - 2 else np.sqrt(1.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_out, fan_in)) * scale)
            self.biases.append(np.zeros(fan_out))
        # FiLM affines: one per hidden layer, mapping embedding -> (scale, shift)
        self.film_weights: list[np.ndarray] = []
        self.film_biases: list[np.ndarray] = []
        if self.embed_dim is not None:
            for width in self.hidden_dims:
                self.film_weights.append(np.zeros((2 * width, self.embed_dim)))
                b = np.zeros(2 * width)
                b[:width] = 1.0  # identity modulation at init
                self.film_biases.append(b)

    # ---------------------------------------------------------------- params

    def _param_arrays(self) -> list[np.ndarray]:
        arrays: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            arrays.extend((w, b))
        for fw, fb in zip(self.film_weights, self.film_biases):
            arrays.extend((fw, fb))
        return arrays

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._param_arrays())

    def get_params(self) -> np.ndarray:
        """Flatten all parameters into one vector (bit-exact round trip)."""
        return np.concatenate([a.ravel() for a in self._param_arrays()])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"expected parameter vector of length {self.n_params}, got {flat.shape}")
        offset = 0
        for a in self._param_arrays():
            a[...] = flat[offset : offset + a.size].reshape(a.shape)
            offset += a.size

    def clone(self) -> "DenseNet":
        other = DenseNet(
            self.input_dim, self.hidden_dims, self.output_dim,
            embed_dim=self.embed_dim, activation=self.activation, seed=0,
        )
        other.set_params(self.get_params())
        return other

    # --------------------------------------------------------------- forward

    def _check_inputs(self, x: np.ndarray, task_embed: np.ndarray | None):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"layer 0 expects input of width {self.input_dim}, got {x.shape}")
        e = None
        if self.embed_dim is not None:
            if task_embed is None:
                raise ShapeError("network has FiLM sites but no task embedding was given")
            e = np.asarray(task_embed, dtype=np.float64)
            if e.ndim == 1:
                e = np.broadcast_to(e, (x.shape[0], e.shape[0]))
            if e.shape != (x.shape[0], self.embed_dim):
                raise ShapeError(f"FiLM affine expects embedding of width {self.embed_dim}, got {e.shape}")
        return x, e, squeeze

    def forward(self, x: np.ndarray, task_embed: np.ndarray | None = None) -> np.ndarray:
        y, _ = self.forward_cache(x, task_embed)
        return y

    def forward_cache(self, x: np.ndarray, task_embed: np.ndarray | None = None):
        """Forward pass returning the output and a cache for ``backward``."""
        x, e, squeeze = self._check_inputs(x, task_embed)
        h = x
        layer_caches = []
        n_hidden = len(self.hidden_dims)
        for i in range(n_hidden):
            z = h @ self.weights[i].T + self.biases[i]
            if e is not None:
                width = self.hidden_dims[i]
                mod = e @ self.film_weights[i].T + self.film_biases[i]
                scale, shift = mod[:, :width], mod[:, width:]
                m = scale * z + shift
            else:
                scale = shift = None
                m = z
            a = _activate(self.activation, m)
            layer_caches.append((h, z, scale, m))
            h = a
        y = h @ self.weights[-1].T + self.biases[-1]
        cache = (layer_caches, h, e, squeeze)
        return (y[0] if squeeze else y), cache

    # -------------------------------------------------------------- backward

    def backward(self, cache, upstream: np.ndarray):
        """Reverse-mode pass.

        ``upstream`` is dL/d(output), matching the forward output's shape.
        Returns ``(param_grad, input_grad)`` where ``param_grad`` is a flat
        vector aligned with :meth:`get_params`.
        """
        layer_caches, last_hidden, e, squeeze = cache
        batch = last_hidden.shape[0]
        g = np.asarray(upstream, dtype=np.float64)
        if squeeze:
            g = np.atleast_1d(g)
            if g.shape != (self.output_dim,):
                raise ShapeError(f"upstream gradient shape {g.shape} != ({self.output_dim},)")
            g = g[None, :]
        else:
            if g.ndim == 1 and self.output_dim == 1:
                g = g[:, None]
            if g.shape != (batch, self.output_dim):
                raise ShapeError(f"upstream gradient shape {g.shape} != ({batch}, {self.output_dim})")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite upstream gradient")

        grad_w = [np.zeros_like(w) for w in self.weights]
        grad_b = [np.zeros_like(b) for b in self.biases]
        grad_fw = [np.zeros_like(w) for w in self.film_weights]
        grad_fb = [np.zeros_like(b) for b in self.film_biases]

        # output layer
        grad_w[-1] = g.T @ last_hidden
        grad_b[-1] = g.sum(axis=0)
        da = g @ self.weights[-1]

        for i in range(len(self.hidden_dims) - 1, -1, -1):
            h_in, z, scale, m = layer_caches[i]
            dm = da * _activate_grad(self.activation, m)
            if scale is not None:
                width = self.hidden_dims[i]
                dscale = dm * z
                dshift = dm
                dmod = np.concatenate([dscale, dshift], axis=1)
                grad_fw[i] = dmod.T @ e
                grad_fb[i] = dmod.sum(axis=0)
                dz = dm * scale
            else:
                dz = dm
            grad_w[i] = dz.T @ h_in
            grad_b[i] = dz.sum(axis=0)
            da = dz @ self.weights[i]

        pieces = []
        for w, b in zip(grad_w, grad_b):
            pieces.extend((w.ravel(), b.ravel()))
        for fw, fb in zip(grad_fw, grad_fb):
            pieces.extend((fw.ravel(), fb.ravel()))
        input_grad = da[0] if squeeze else da
        return np.concatenate(pieces), input_grad

    def grad(self, x, task_embed, upstream):
        """Convenience: forward then backward, returning the parameter gradient."""
        _, cache = self.forward_cache(x, task_embed)
        return self.backward(cache, upstream)[0]


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(n_params: int, learning_rate: float = 3e-4, **kwargs) -> AdamState:
    return AdamState(
        first_moment=np.zeros(n_params),
        second_moment=np.zeros(n_params),
        learning_rate=learning_rate,
        **kwargs,
    )


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``state``, returns new params."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or grads.shape != state.first_moment.shape:
        raise ShapeError("parameter/gradient/moment lengths disagree")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grads
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * grads * grads
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def polyak_update(target_params: np.ndarray, online_params: np.ndarray, rate: float) -> np.ndarray:
    """target <- (1 - rate) * target + rate * online, elementwise."""
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"polyak rate must lie in [0, 1], got {rate}")
    if target_params.shape != online_params.shape:
        raise ShapeError("target/online parameter shapes disagree")
    return (1.0 - rate) * target_params + rate * online_params


# ------------------------------------------------------- task embeddings


def make_task_embeddings(n_tasks: int, dim: int = 16, seed: int = 0) -> np.ndarray:
    """Fixed orthonormal embedding table, one row per task id."""
    if n_tasks > dim:
        raise ValueError(f"orthogonal table needs n_tasks <= dim ({n_tasks} > {dim})")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return np.ascontiguousarray(q[:n_tasks])


# ------------------------------------------------------------ checkpoints


def _net_arch(net: DenseNet) -> dict:
    return {
        "input_dim": net.input_dim,
        "hidden_dims": list(net.hidden_dims),
        "output_dim": net.output_dim,
        "embed_dim": net.embed_dim,
        "activation": net.activation,
    }


def save_checkpoint(path, nets: dict[str, DenseNet], embeddings: np.ndarray | None,
                    config: dict) -> None:
    """Write a versioned container with net shapes, parameters, the embedding
    table, and the training config."""
    payload = {
        "magic": np.array(_CKPT_MAGIC),
        "version": np.array(_CKPT_VERSION),
        "config_json": np.array(json.dumps(config, sort_keys=True)),
        "net_names": np.array(sorted(nets)),
    }
    for name in nets:
        payload[f"arch__{name}"] = np.array(json.dumps(_net_arch(nets[name])))
        payload[f"params__{name}"] = nets[name].get_params()
    if embeddings is not None:
        payload["embeddings"] = np.asarray(embeddings)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Load a checkpoint; returns ``(nets, embeddings, config)``."""
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "magic" not in data or str(data["magic"]) != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a vsteer checkpoint (bad magic)")
    if int(data["version"]) != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {int(data['version'])}")
    nets: dict[str, DenseNet] = {}
    for name in data["net_names"]:
        arch = json.loads(str(data[f"arch__{name}"]))
        net = DenseNet(
            arch["input_dim"], tuple(arch["hidden_dims"]), arch["output_dim"],
            embed_dim=arch["embed_dim"], activation=arch["activation"], seed=0,
        )
        net.set_params(data[f"params__{name}"])
        nets[str(name)] = net
    embeddings = data["embeddings"] if "embeddings" in data else None
    config = json.loads(str(data["config_json"]))
    return nets, embeddings, config
