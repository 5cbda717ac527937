"""Dense MLP with hand-written backprop, Adam, and a diagonal Gaussian policy head.

Matrices are plain 2-D float64 numpy arrays (C-contiguous, row-major).
Weight convention: a layer maps ``x[batch, in] -> x @ W + b`` with
``W.shape == (in, out)`` and ``b.shape == (out,)``.  Hidden layers use tanh,
the output layer is linear.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UsageError(RuntimeError):
    pass


def as_tensor2(x, name: str = "tensor") -> np.ndarray:
    """Validate and return ``x`` as a finite, C-contiguous float64 matrix."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class MlpParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i}: input width {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}"
                )
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(w.shape[1] for w in self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def with_arrays(self, arrays) -> MlpParams:
        arrays = list(arrays)
        return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), self.activation)


def init_mlp(sizes, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``out_scale`` shrinks the final layer, which keeps an untrained policy
    close to zero mean.
    """
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if i == len(sizes) - 2:
            w = w * out_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases))


@dataclass(frozen=True)
class MlpCache:
    params_id: int
    inputs: tuple[np.ndarray, ...]  # input to each layer
    hidden: tuple[np.ndarray, ...]  # tanh outputs (equal to inputs[1:])


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(
            f"input shape {x.shape} incompatible with first layer weight {params.weights[0].shape}"
        )
    inputs = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        h = z if i == last else np.tanh(z)
    if not np.all(np.isfinite(h)):
        raise NumericError("mlp_forward produced non-finite output")
    return h, MlpCache(id(params), tuple(inputs), tuple(inputs[1:]))


def mlp_apply(params: MlpParams, x) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mlp_backward(params: MlpParams, cache: MlpCache, upstream) -> MlpParams:
    """Gradients of ``sum(upstream * output)`` w.r.t. every weight and bias.

    Returned as an :class:`MlpParams` with the same shapes as ``params``.
    """
    if cache.params_id != id(params) or len(cache.inputs) != len(params.weights):
        raise UsageError("cache does not belong to these params; rerun mlp_forward")
    g = np.asarray(upstream, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, params.out_dim):
        raise DimensionError(f"upstream grad shape {g.shape} != output shape {(batch, params.out_dim)}")
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        if i:
            h = cache.inputs[i]
            g = (g @ params.weights[i].T) * (1.0 - h * h)
    return MlpParams(tuple(gw), tuple(gb), params.activation)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def __post_init__(self):
        if self.m.shape != self.v.shape or self.m.ndim != 1:
            raise DimensionError(f"moment shapes differ: m {self.m.shape}, v {self.v.shape}")
        if self.t < 0:
            raise ValueError("adam step counter must be >= 0")


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update on a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(
            f"params {params.shape}, grads {grads.shape}, moments {state.m.shape} must align"
        )
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient; adam step aborted")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(new)):
        raise NumericError("adam step produced non-finite parameters")
    return new, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# Gaussian policy


@dataclass(frozen=True)
class GaussianPolicy:
    """Diagonal Gaussian with network mean and state-independent log std."""

    mean_net: MlpParams
    log_std: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.log_std is None:
            object.__setattr__(self, "log_std", np.zeros(self.mean_net.out_dim))
        if self.log_std.shape != (self.mean_net.out_dim,):
            raise DimensionError(
                f"log_std shape {self.log_std.shape} != action dim {self.mean_net.out_dim}"
            )
        if not np.all(np.isfinite(self.log_std)):
            raise NumericError("log_std must be finite")

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    def mean(self, states) -> np.ndarray:
        return mlp_apply(self.mean_net, states)


def _log_prob_from_mean(mean, log_std, actions) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * LOG_2PI * mean.shape[1]


def gaussian_log_prob(policy: GaussianPolicy, states, actions) -> np.ndarray:
    mean = policy.mean(states)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != mean.shape:
        raise DimensionError(f"actions shape {actions.shape} != policy output {mean.shape}")
    return _log_prob_from_mean(mean, policy.log_std, actions)


def gaussian_entropy(policy: GaussianPolicy) -> float:
    return float(np.sum(policy.log_std) + 0.5 * (1.0 + LOG_2PI) * policy.action_dim)


def policy_sample(policy: GaussianPolicy, states, rng: np.random.Generator):
    """Sample actions; returns ``(actions, log_probs)``."""
    mean = policy.mean(states)
    actions = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
    return actions, _log_prob_from_mean(mean, policy.log_std, actions)
