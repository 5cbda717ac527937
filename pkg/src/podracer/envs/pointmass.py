"""PointMass2D: a damped point mass pushed toward a goal in the plane.

State layout: ``(pos_x, pos_y, vel_x, vel_y, goal_x, goal_y)``.
Initial distribution: position and goal independently uniform on
``[-init_half_width, init_half_width]^2`` (default 0.4), velocity zero.
"""
from __future__ import annotations

import numpy as np

from .vec import EnvSpec, VectorizedEnvironment

GOAL_RADIUS = 0.05
GOAL_BONUS = 10.0
ACTION_COST = 0.01
MAX_STEPS = 200


def pointmass_step(state, action):
    """Closed-form dynamics; works on one state or a batch of rows."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    pos, vel, goal = state[..., 0:2], state[..., 2:4], state[..., 4:6]
    vel = 0.9 * vel + 0.1 * action
    pos = pos + 0.1 * vel
    dist = np.sqrt(np.sum((pos - goal) ** 2, axis=-1))
    reward = -dist - ACTION_COST * np.sum(action * action, axis=-1)
    done = dist < GOAL_RADIUS
    reward = reward + GOAL_BONUS * done
    return np.concatenate([pos, vel, goal], axis=-1), reward, done


class PointMass2D:
    internal_dim = 6

    def __init__(self, init_half_width: float = 0.4, max_episode_steps: int = MAX_STEPS):
        self.init_half_width = init_half_width
        self.spec = EnvSpec(
            state_dim=6,
            action_dim=2,
            action_low=-np.ones(2),
            action_high=np.ones(2),
            max_episode_steps=max_episode_steps,
            reward_target=5.0,
        )

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        w = self.init_half_width
        pos = rng.uniform(-w, w, size=2)
        goal = rng.uniform(-w, w, size=2)
        return np.concatenate([pos, np.zeros(2), goal])

    def step(self, states, actions):
        return pointmass_step(states, actions)

    def observe(self, states):
        return np.array(states, dtype=np.float64)


def pointmass_factory(**task_kw):
    """``factory(num_envs, seed) -> VectorizedEnvironment`` for PointMass2D."""
    def factory(num_envs: int, seed: int = 0) -> VectorizedEnvironment:
        return VectorizedEnvironment(PointMass2D(**task_kw), num_envs, seed)
    return factory
