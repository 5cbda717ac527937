"""PPO: rollout buffer, GAE, clipped-surrogate losses with analytic gradients."""
from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .agent import AgentArtifact
from .tensor_core import (
    LOG_2PI,
    DimensionError,
    NumericError,
    UsageError,
    adam_step,
    mlp_backward,
    mlp_forward,
)


class CapacityError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs_per_update: int = 4
    minibatch_size: int = 1024
    buffer_size: int = 4096
    learning_rate: float = 1e-3
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if self.minibatch_size > self.buffer_size:
            raise ValueError(
                f"minibatch_size ({self.minibatch_size}) must not exceed buffer_size ({self.buffer_size})"
            )
        if self.epochs_per_update < 1 or self.minibatch_size < 1:
            raise ValueError("epochs_per_update and minibatch_size must be >= 1")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    log_prob: float
    reward: float
    done: bool
    value: float


class TransitionBuffer:
    """Fixed-capacity columnar store; each column is one contiguous array.

    Workers fill disjoint ``[offset, offset + n)`` segments through
    :meth:`write`.  ``advantages`` and ``returns`` are filled alongside.
    """

    FIELDS = ("states", "actions", "log_probs", "rewards", "dones", "values", "advantages", "returns")

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.log_probs = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.values = np.zeros(capacity)
        self.advantages = np.zeros(capacity)
        self.returns = np.zeros(capacity)
        self._filled = np.zeros(capacity, dtype=bool)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return int(self._filled.sum())

    @property
    def length(self) -> int:
        return len(self)

    @property
    def full(self) -> bool:
        return bool(self._filled.all())

    def write(self, offset: int, **columns) -> None:
        n = len(columns["states"])
        if offset < 0 or offset + n > self.capacity:
            raise CapacityError(f"segment [{offset}, {offset + n}) exceeds capacity {self.capacity}")
        for name, value in columns.items():
            if name not in self.FIELDS:
                raise KeyError(name)
            getattr(self, name)[offset:offset + n] = value
        with self._lock:
            self._filled[offset:offset + n] = True

    def freeze(self) -> None:
        """Make every column read-only; learners must not mutate shared data."""
        for name in self.FIELDS:
            getattr(self, name).flags.writeable = False

    def transition(self, i: int) -> Transition:
        return Transition(
            self.states[i].copy(), self.actions[i].copy(), float(self.log_probs[i]),
            float(self.rewards[i]), bool(self.dones[i]), float(self.values[i]),
        )

    def snapshot(self) -> TransitionBuffer:
        out = TransitionBuffer(self.capacity, self.states.shape[1], self.actions.shape[1])
        for name in self.FIELDS:
            getattr(out, name)[:] = getattr(self, name)
        out._filled[:] = self._filled
        return out


def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Generalized advantage estimates and value targets.

    Arrays are indexed by time along axis 0; extra trailing axes (e.g. one
    column per sub-environment) are processed independently.  ``dones[t]``
    marks transition ``t`` as the last of its episode.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if rewards.shape != values.shape or rewards.shape != dones.shape or rewards.shape[0] < 1:
        raise DimensionError(
            f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape} must match with T >= 1"
        )
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), rewards.shape[1:])
    last = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


class PpoLosses(NamedTuple):
    policy_loss: float
    value_loss: float
    entropy: float


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


def _losses_and_grad(artifact: AgentArtifact, states, actions, old_log_probs, advantages, returns,
                     config: PpoConfig, need_grad: bool = True):
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    batch = states.shape[0]
    actor = artifact.actor
    mean, acache = mlp_forward(actor.mean_net, states)
    if actions.shape != mean.shape:
        raise DimensionError(f"actions {actions.shape} != policy output {mean.shape}")
    inv_std = np.exp(-actor.log_std)
    z = (actions - mean) * inv_std
    log_prob = -0.5 * np.sum(z * z, axis=1) - np.sum(actor.log_std) - 0.5 * LOG_2PI * mean.shape[1]
    ratio = np.exp(log_prob - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * advantages
    policy_loss = -float(np.mean(np.minimum(unclipped, clipped)))

    value_out, ccache = mlp_forward(artifact.critic, states)
    value_err = value_out[:, 0] - returns
    value_loss = float(np.mean(value_err * value_err))
    entropy = float(np.sum(actor.log_std) + 0.5 * (1.0 + LOG_2PI) * actor.action_dim)

    for name, val in (("policy_loss", policy_loss), ("value_loss", value_loss), ("entropy", entropy)):
        if not np.isfinite(val):
            raise NumericError(f"non-finite {name}")
    losses = PpoLosses(policy_loss, value_loss, entropy)
    if not need_grad:
        return losses, None

    active = unclipped <= clipped
    d_logp = -(ratio * advantages * active) / batch
    g_mean = d_logp[:, None] * z * inv_std
    g_log_std = d_logp @ (z * z - 1.0) - config.entropy_coef
    g_actor = mlp_backward(actor.mean_net, acache, g_mean)
    g_value = (config.value_coef * 2.0 / batch) * value_err[:, None]
    g_critic = mlp_backward(artifact.critic, ccache, g_value)
    grad = np.concatenate(
        [a.ravel() for a in g_actor.arrays()] + [g_log_std] + [a.ravel() for a in g_critic.arrays()]
    )
    return losses, grad


def ppo_losses(artifact, states, actions, old_log_probs, advantages, returns, config: PpoConfig) -> PpoLosses:
    """Clipped surrogate, squared value error and mean policy entropy."""
    return _losses_and_grad(artifact, states, actions, old_log_probs, advantages, returns, config, False)[0]


def ppo_gradient(artifact, states, actions, old_log_probs, advantages, returns, config: PpoConfig):
    """Flat gradient of ``policy + value_coef*value - entropy_coef*entropy``.

    Ordering matches :meth:`AgentArtifact.flat_params`.
    """
    return _losses_and_grad(artifact, states, actions, old_log_probs, advantages, returns, config, True)


def total_loss(losses: PpoLosses, config: PpoConfig) -> float:
    return losses.policy_loss + config.value_coef * losses.value_loss - config.entropy_coef * losses.entropy


def ppo_update(artifact: AgentArtifact, buffer: TransitionBuffer, config: PpoConfig, rng: np.random.Generator):
    """Several epochs of shuffled minibatch Adam steps over a filled buffer."""
    n = len(buffer)
    if n < config.minibatch_size:
        raise UsageError(f"buffer holds {n} transitions, fewer than minibatch_size {config.minibatch_size}")
    adv = normalize_advantages(buffer.advantages[:n])
    params = artifact.flat_params()
    opt = replace(artifact.optimizer, lr=config.learning_rate)
    current = artifact
    sums = np.zeros(3)
    steps = 0
    for _ in range(config.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n - config.minibatch_size + 1, config.minibatch_size):
            idx = perm[start:start + config.minibatch_size]
            losses, grad = ppo_gradient(
                current, buffer.states[idx], buffer.actions[idx], buffer.log_probs[idx],
                adv[idx], buffer.returns[idx], config,
            )
            if config.max_grad_norm > 0:
                norm = float(np.linalg.norm(grad))
                if norm > config.max_grad_norm:
                    grad = grad * (config.max_grad_norm / norm)
            params, opt = adam_step(params, grad, opt)
            current = current.with_flat_params(params)
            sums += losses
            steps += 1
    new = replace(current, optimizer=opt)
    mean = sums / steps
    stats = {"policy_loss": mean[0], "value_loss": mean[1], "entropy": mean[2], "minibatch_steps": steps}
    return new, stats
