"""Algorithm registry.

A pod needs two things from an algorithm: a way to build a fresh artifact and
an update rule ``(artifact, buffer, config, rng) -> (artifact, stats)``.  Only
PPO is implemented; the off-policy families are named so configs can refer to
them and fail with a clear message.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .agent import make_artifact
from .ppo import ppo_update


@dataclass(frozen=True)
class Algorithm:
    name: str
    make_artifact: Callable
    update: Callable


_IMPLEMENTED = {"ppo": Algorithm("ppo", make_artifact, ppo_update)}
_PLANNED = ("dqn", "ddpg", "td3", "sac")

ALGORITHMS = tuple(_IMPLEMENTED) + _PLANNED


def get_algorithm(name: str) -> Algorithm:
    key = name.lower()
    if key in _IMPLEMENTED:
        return _IMPLEMENTED[key]
    if key in _PLANNED:
        raise NotImplementedError(f"algorithm {name!r} has an interface slot but no implementation; use 'ppo'")
    raise KeyError(f"unknown algorithm {name!r}; known: {', '.join(ALGORITHMS)}")
