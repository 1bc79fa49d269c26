"""Minimal deep Q-learning in numpy: a feedforward Q-network with a frozen
target copy, a FIFO replay buffer, an epsilon schedule, and one SGD step on
the squared Bellman error of the taken action.

The loss is 0.5 * mean((Q(s)[a] - target)^2), so with a bias-free linear
network on one-hot states a single-sample step reduces exactly to the
classical tabular update Q <- Q + lr * (r + gamma * max Q'(s') - Q).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from qroute.errors import ConfigError, ContractError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    discount: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 500
    target_sync_period: int = 200
    batch_size: int = 32
    buffer_capacity: int = 10_000
    hidden_sizes: tuple[int, ...] = (128, 128)
    grad_clip: float | None = 10.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError(f"discount must be in [0, 1], got {self.discount}")
        for name in ("epsilon_start", "epsilon_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.epsilon_decay_steps < 0:
            raise ConfigError("epsilon_decay_steps must be >= 0")
        if self.target_sync_period < 1:
            raise ConfigError("target_sync_period must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.buffer_capacity < self.batch_size:
            raise ConfigError("buffer_capacity must be >= batch_size")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")


class Transition(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform batch sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._pos = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._pos] = t
            self._pos = (self._pos + 1) % self.capacity

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        """n distinct transitions, uniform without replacement."""
        if n > len(self._items):
            raise ContractError(f"cannot sample {n} from buffer of {len(self._items)}")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


class QNetwork:
    """Fully connected ReLU network with prediction and target weight sets.

    Weights are uniform fan-in-scaled at init, biases zero.  ``hidden_sizes``
    may be empty, giving a single linear layer.
    """

    def __init__(self, input_dim: int, output_dim: int,
                 hidden_sizes: tuple[int, ...] = (128, 128),
                 rng: np.random.Generator | None = None,
                 use_bias: bool = True):
        if input_dim < 1 or output_dim < 1:
            raise ConfigError("input_dim and output_dim must be >= 1")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.use_bias = use_bias
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(0))
        sizes = [input_dim, *self.hidden_sizes, output_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.target_weights = [w.copy() for w in self.weights]
        self.target_biases = [b.copy() for b in self.biases]

    def _params(self, which: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
        if which == "prediction":
            return self.weights, self.biases
        if which == "target":
            return self.target_weights, self.target_biases
        raise ContractError(f"unknown weight set: {which!r}")

    def forward(self, x: np.ndarray, which: str = "prediction") -> np.ndarray:
        """Q-values for one state (1d input) or a batch (2d input)."""
        ws, bs = self._params(which)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.input_dim:
            raise ContractError(
                f"state dim {h.shape[1]} does not match network input {self.input_dim}")
        for w, b in zip(ws[:-1], bs[:-1]):
            h = h @ w
            if self.use_bias:
                h = h + b
            h = np.maximum(h, 0.0)
        out = h @ ws[-1]
        if self.use_bias:
            out = out + bs[-1]
        return out[0] if single else out

    def sync_target(self) -> None:
        """Copy prediction weights into the target set (no aliasing)."""
        self.target_weights = [w.copy() for w in self.weights]
        self.target_biases = [b.copy() for b in self.biases]


def epsilon_at(cfg: TrainConfig, step: int) -> float:
    """Linear schedule from epsilon_start to epsilon_end over decay_steps."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if cfg.epsilon_decay_steps == 0 or step >= cfg.epsilon_decay_steps:
        return cfg.epsilon_end
    frac = step / cfg.epsilon_decay_steps
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac


def bellman_targets(qnet: QNetwork, rewards: np.ndarray, next_states: np.ndarray,
                    terminals: np.ndarray, gamma: float) -> np.ndarray:
    """r + gamma * max_a Q_target(s', a), with no bootstrap on terminals."""
    q_next = qnet.forward(next_states, which="target")
    if q_next.ndim == 1:
        q_next = q_next[None, :]
    best = q_next.max(axis=1)
    return np.asarray(rewards, dtype=float) + gamma * best * (
        1.0 - np.asarray(terminals, dtype=float))


def bellman_target(qnet: QNetwork, reward: float, next_state: np.ndarray,
                   terminal: bool, gamma: float) -> float:
    return float(bellman_targets(qnet, np.array([reward]), next_state[None, :],
                                 np.array([terminal]), gamma)[0])


def loss_and_grads(qnet: QNetwork, states: np.ndarray, actions: np.ndarray,
                   targets: np.ndarray) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Half-MSE on the taken actions and its gradients w.r.t. prediction
    weights.  Exposed separately so tests can finite-difference the loss."""
    ws, bs = qnet.weights, qnet.biases
    batch = states.shape[0]
    acts = [states]
    pre: list[np.ndarray] = []
    h = states
    for w, b in zip(ws[:-1], bs[:-1]):
        z = h @ w
        if qnet.use_bias:
            z = z + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    q = h @ ws[-1]
    if qnet.use_bias:
        q = q + bs[-1]
    idx = np.arange(batch)
    err = q[idx, actions] - targets
    loss = 0.5 * float(np.mean(err ** 2))
    g_q = np.zeros_like(q)
    g_q[idx, actions] = err / batch
    grads_w: list[np.ndarray] = [np.empty(0)] * len(ws)
    grads_b: list[np.ndarray] = [np.empty(0)] * len(bs)
    g = g_q
    for layer in range(len(ws) - 1, -1, -1):
        grads_w[layer] = acts[layer].T @ g
        grads_b[layer] = g.sum(axis=0)
        if layer > 0:
            g = (g @ ws[layer].T) * (pre[layer - 1] > 0.0)
    return loss, grads_w, grads_b


def sgd_step(qnet: QNetwork, batch: list[Transition], cfg: TrainConfig) -> float:
    """One SGD update on a replay batch; returns the pre-step loss."""
    if not batch:
        raise ContractError("sgd_step requires a non-empty batch")
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch], dtype=int)
    rewards = np.array([t.reward for t in batch], dtype=float)
    next_states = np.stack([t.next_state for t in batch])
    terminals = np.array([t.terminal for t in batch], dtype=bool)
    targets = bellman_targets(qnet, rewards, next_states, terminals, cfg.discount)
    loss, grads_w, grads_b = loss_and_grads(qnet, states, actions, targets)
    sq = sum(float((g ** 2).sum()) for g in grads_w)
    if qnet.use_bias:
        sq += sum(float((g ** 2).sum()) for g in grads_b)
    if not np.isfinite(sq) or not np.isfinite(loss):
        raise ContractError("non-finite gradient in sgd_step (learning-rate blowup)")
    scale = 1.0
    norm = np.sqrt(sq)
    if cfg.grad_clip is not None and norm > cfg.grad_clip:
        scale = cfg.grad_clip / norm
    lr = cfg.learning_rate * scale
    for w, g in zip(qnet.weights, grads_w):
        w -= lr * g
    if qnet.use_bias:
        for b, g in zip(qnet.biases, grads_b):
            b -= lr * g
    return loss


def save_weights(qnet: QNetwork, path: str | Path) -> None:
    """Checkpoint both weight sets as JSON (exact float round-trip)."""
    doc = {
        "input_dim": qnet.input_dim,
        "output_dim": qnet.output_dim,
        "hidden_sizes": list(qnet.hidden_sizes),
        "use_bias": qnet.use_bias,
        "prediction": {
            "weights": [w.tolist() for w in qnet.weights],
            "biases": [b.tolist() for b in qnet.biases],
        },
        "target": {
            "weights": [w.tolist() for w in qnet.target_weights],
            "biases": [b.tolist() for b in qnet.target_biases],
        },
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_weights(path: str | Path) -> QNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid checkpoint JSON in {path}: {exc}") from exc
    for key in ("input_dim", "output_dim", "hidden_sizes", "use_bias",
                "prediction", "target"):
        if key not in doc:
            raise ConfigError(f"checkpoint missing field: {key}")
    qnet = QNetwork(doc["input_dim"], doc["output_dim"],
                    tuple(doc["hidden_sizes"]), use_bias=doc["use_bias"])
    for name, store_w, store_b in (("prediction", qnet.weights, qnet.biases),
                                   ("target", qnet.target_weights, qnet.target_biases)):
        raw = doc[name]
        if len(raw["weights"]) != len(store_w):
            raise ConfigError(f"checkpoint {name} has wrong layer count")
        for i, (w, b) in enumerate(zip(raw["weights"], raw["biases"])):
            arr_w, arr_b = np.asarray(w, dtype=float), np.asarray(b, dtype=float)
            if arr_w.shape != store_w[i].shape or arr_b.shape != store_b[i].shape:
                raise ConfigError(
                    f"checkpoint {name} layer {i} shape {arr_w.shape} does not "
                    f"match {store_w[i].shape}")
            store_w[i][...] = arr_w
            store_b[i][...] = arr_b
    return qnet
