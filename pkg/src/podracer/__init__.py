"""Tournament-based ensemble training of PPO agents with pods of workers and learners."""
from .agent import AgentArtifact, Lineage, make_artifact
from .checkpoint import CorruptionError, VersionError, load_checkpoint, save_checkpoint
from .pod import PodConfig, PodResult, StopConfig, evaluate, pod_train
from .ppo import PpoConfig, TransitionBuffer, compute_gae, ppo_update
from .tournament import GeneratorConfig, Leaderboard, Orchestrator, PoolConfig, leaderboard_update

__version__ = "0.1.0"

__all__ = [
    "AgentArtifact", "Lineage", "make_artifact",
    "CorruptionError", "VersionError", "load_checkpoint", "save_checkpoint",
    "PodConfig", "PodResult", "StopConfig", "evaluate", "pod_train",
    "PpoConfig", "TransitionBuffer", "compute_gae", "ppo_update",
    "GeneratorConfig", "Leaderboard", "Orchestrator", "PoolConfig", "leaderboard_update",
]
