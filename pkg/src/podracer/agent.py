"""The agent's "training files": actor, critic, optimizer state and lineage."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor_core import AdamState, DimensionError, GaussianPolicy, MlpParams, init_mlp

HIDDEN = (64, 64)


@dataclass(frozen=True)
class Lineage:
    parent_id: Optional[str] = None
    mutation_seed: Optional[int] = None


@dataclass(frozen=True)
class AgentArtifact:
    actor: GaussianPolicy
    critic: MlpParams
    optimizer: AdamState
    buffer_snapshot: object = None  # TransitionBuffer, only kept by off-policy algorithms
    lineage: Lineage = field(default_factory=Lineage)
    algo_tag: str = "ppo"
    agent_id: str = ""
    score: Optional[float] = None  # evaluation mean at snapshot time
    env_steps: int = 0

    def __post_init__(self):
        if self.critic.out_dim != 1:
            raise DimensionError(f"critic must output one value, got {self.critic.out_dim}")
        if self.critic.in_dim != self.actor.mean_net.in_dim:
            raise DimensionError(
                f"actor input {self.actor.mean_net.in_dim} != critic input {self.critic.in_dim}"
            )
        if self.optimizer.m.size != self.num_params:
            raise DimensionError(
                f"optimizer holds {self.optimizer.m.size} moments for {self.num_params} parameters"
            )

    @property
    def state_dim(self) -> int:
        return self.critic.in_dim

    @property
    def action_dim(self) -> int:
        return self.actor.action_dim

    @property
    def num_params(self) -> int:
        return self.actor.mean_net.num_params + self.actor.log_std.size + self.critic.num_params

    def param_arrays(self) -> list[np.ndarray]:
        """Actor weights/biases, log_std, then critic weights/biases."""
        return self.actor.mean_net.arrays() + [self.actor.log_std] + self.critic.arrays()

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def with_flat_params(self, flat: np.ndarray) -> AgentArtifact:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise DimensionError(f"flat vector {flat.shape} != ({self.num_params},)")
        arrays, pos = [], 0
        for a in self.param_arrays():
            arrays.append(flat[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        n_actor = len(self.actor.mean_net.arrays())
        actor = GaussianPolicy(self.actor.mean_net.with_arrays(arrays[:n_actor]), arrays[n_actor])
        critic = self.critic.with_arrays(arrays[n_actor + 1:])
        return replace(self, actor=actor, critic=critic)

    def shape_signature(self) -> tuple:
        return tuple(a.shape for a in self.param_arrays())


def make_artifact(
    state_dim: int,
    action_dim: int,
    rng: np.random.Generator,
    hidden=HIDDEN,
    lr: float = 1e-3,
    init_log_std: float = -0.5,
    agent_id: str = "",
) -> AgentArtifact:
    """Freshly initialized PPO agent: separate actor and critic MLPs."""
    sizes = (state_dim, *hidden)
    actor_net = init_mlp(sizes + (action_dim,), rng, out_scale=0.1)
    critic = init_mlp(sizes + (1,), rng)
    actor = GaussianPolicy(actor_net, np.full(action_dim, float(init_log_std)))
    n = actor_net.num_params + action_dim + critic.num_params
    return AgentArtifact(actor, critic, AdamState.zeros(n, lr=lr), agent_id=agent_id)
