"""Batched environment: N independent sub-environments stepped with one call."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..tensor_core import DimensionError


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    reward_target: float = float("inf")

    def __post_init__(self):
        lo = np.asarray(self.action_low, dtype=np.float64)
        hi = np.asarray(self.action_high, dtype=np.float64)
        if lo.shape != (self.action_dim,) or hi.shape != (self.action_dim,):
            raise DimensionError(f"action bounds must have shape ({self.action_dim},)")
        if not np.all(lo < hi):
            raise ValueError("action_low must be < action_high elementwise")
        object.__setattr__(self, "action_low", lo)
        object.__setattr__(self, "action_high", hi)


class Task(Protocol):
    """Batched task dynamics.

    ``internal_dim`` is the width of the raw simulator state; ``observe`` maps
    it to the ``spec.state_dim`` features the agent sees.
    """

    spec: EnvSpec
    internal_dim: int

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, states: np.ndarray, actions: np.ndarray): ...

    def observe(self, states: np.ndarray) -> np.ndarray: ...


def env_stream(seed, index: int) -> np.random.Generator:
    """RNG for sub-env ``index``; independent of how many envs are batched."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


class VectorizedEnvironment:
    """Steps ``num_envs`` copies of a task and auto-resets finished rows.

    ``step`` returns ``(obs, rewards, dones, infos)``.  For every row with
    ``dones[i]`` the returned observation is already the fresh reset state;
    the final observation of the finished episode is in
    ``infos["terminal_obs"][i]`` and ``infos["truncated"][i]`` tells whether
    the episode hit the step limit rather than a terminal state.
    """

    def __init__(self, task: Task, num_envs: int, seed: int = 0):
        if num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        self.task = task
        self.spec = task.spec
        self.num_envs = num_envs
        self.seed = seed
        self.sub_states = np.zeros((num_envs, task.internal_dim))
        self.step_counts = np.zeros(num_envs, dtype=np.int64)
        self.rngs: list[np.random.Generator] = []
        self.reset(seed)

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.seed = seed
        self.rngs = [env_stream(self.seed, i) for i in range(self.num_envs)]
        for i, rng in enumerate(self.rngs):
            self.sub_states[i] = self.task.reset(rng)
        self.step_counts[:] = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.task.observe(self.sub_states)

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, self.spec.action_dim):
            raise DimensionError(
                f"actions shape {actions.shape} != ({self.num_envs}, {self.spec.action_dim})"
            )
        actions = np.clip(actions, self.spec.action_low, self.spec.action_high)
        nxt, rewards, terminal = self.task.step(self.sub_states, actions)
        self.sub_states = np.array(nxt, dtype=np.float64)
        self.step_counts += 1
        terminal = np.asarray(terminal, dtype=bool)
        truncated = ~terminal & (self.step_counts >= self.spec.max_episode_steps)
        dones = terminal | truncated
        obs = self.task.observe(self.sub_states)
        terminal_obs = obs.copy()
        for i in np.flatnonzero(dones):
            self.sub_states[i] = self.task.reset(self.rngs[i])
            self.step_counts[i] = 0
        if dones.any():
            obs[dones] = self.task.observe(self.sub_states[dones])
        infos = {"terminal_obs": terminal_obs, "truncated": truncated}
        return obs, np.asarray(rewards, dtype=np.float64), dones, infos
