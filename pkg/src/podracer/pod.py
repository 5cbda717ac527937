"""One agent's training runtime: workers, learners and an evaluator.

Each iteration runs three phases separated by barriers:

1. *collect*: every worker steps its own batched environment for
   ``rollout_horizon`` steps and writes a pre-assigned, disjoint segment of
   one shared :class:`~podracer.ppo.TransitionBuffer`;
2. *learn*: the buffer is frozen read-only and each learner runs a full
   ``ppo_update`` from the same starting artifact with its own shuffle stream;
3. *fuse*: learner results are averaged elementwise into the next artifact.

Evaluation snapshots are taken every ``eval_interval_steps`` env steps and may
run on a background thread while training continues.
"""
from __future__ import annotations

import csv
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .agent import AgentArtifact
from .ppo import CapacityError, PpoConfig, TransitionBuffer, compute_gae, ppo_update
from .tensor_core import DimensionError, UsageError, mlp_apply, policy_sample

log = logging.getLogger(__name__)

EnvFactory = Callable[[int, int], object]


class PodError(RuntimeError):
    pass


@dataclass(frozen=True)
class StopConfig:
    max_steps: int = 300_000
    max_seconds: float = float("inf")
    target_reward: float = float("inf")


@dataclass(frozen=True)
class PodConfig:
    num_workers: int = 2
    envs_per_worker: int = 32
    num_learners: int = 2
    rollout_horizon: int = 64
    eval_episodes: int = 10
    eval_interval_steps: int = 4096
    stop: StopConfig = field(default_factory=StopConfig)
    parallel: bool = False  # thread pools for workers, learners and evaluator
    sampled_eval: bool = False

    def __post_init__(self):
        for name in ("num_workers", "envs_per_worker", "num_learners", "rollout_horizon", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def buffer_size(self) -> int:
        return self.num_workers * self.envs_per_worker * self.rollout_horizon

    def check(self, ppo: PpoConfig) -> None:
        if self.buffer_size != ppo.buffer_size:
            raise ValueError(
                f"pod.num_workers*pod.envs_per_worker*pod.rollout_horizon = {self.buffer_size} "
                f"!= ppo.buffer_size = {ppo.buffer_size}"
            )


@dataclass(frozen=True)
class EvaluationRecord:
    wall_seconds: float
    env_steps: int
    episodic_rewards: tuple
    mean: float
    std: float

    @classmethod
    def from_rewards(cls, rewards, wall_seconds: float = 0.0, env_steps: int = 0) -> EvaluationRecord:
        arr = np.asarray(rewards, dtype=np.float64)
        return cls(float(wall_seconds), int(env_steps), tuple(float(r) for r in arr),
                   float(arr.mean()), float(arr.std()))


# ---------------------------------------------------------------------------
# worker


def worker_collect(artifact: AgentArtifact, venv, horizon: int, rng: np.random.Generator,
                   gamma: float = 0.99, lam: float = 0.95,
                   buffer: Optional[TransitionBuffer] = None, offset: int = 0) -> TransitionBuffer:
    """Roll ``horizon`` steps of ``venv`` and store them time-major.

    Transition ``(t, env e)`` lands at ``offset + t*num_envs + e``.  When an
    episode is cut by the step limit, ``gamma * V(terminal_obs)`` is folded
    into its last reward so the advantage estimate still bootstraps.
    """
    n = venv.num_envs
    if buffer is None:
        buffer = TransitionBuffer(horizon * n, venv.spec.state_dim, venv.spec.action_dim)
        offset = 0
    if offset + horizon * n > buffer.capacity:
        raise CapacityError(f"segment of {horizon * n} at offset {offset} overflows {buffer.capacity}")
    if artifact.state_dim != venv.spec.state_dim or artifact.action_dim != venv.spec.action_dim:
        raise DimensionError(
            f"artifact dims ({artifact.state_dim}, {artifact.action_dim}) do not match env "
            f"({venv.spec.state_dim}, {venv.spec.action_dim})"
        )
    sdim, adim = venv.spec.state_dim, venv.spec.action_dim
    states = np.empty((horizon, n, sdim))
    actions = np.empty((horizon, n, adim))
    log_probs = np.empty((horizon, n))
    rewards = np.empty((horizon, n))
    dones = np.empty((horizon, n), dtype=bool)
    values = np.empty((horizon, n))
    obs = venv.observe()
    for t in range(horizon):
        act, logp = policy_sample(artifact.actor, obs, rng)
        val = mlp_apply(artifact.critic, obs)[:, 0]
        nxt, rew, done, info = venv.step(act)
        trunc = info["truncated"]
        if trunc.any():
            rew = rew.copy()
            rew[trunc] += gamma * mlp_apply(artifact.critic, info["terminal_obs"][trunc])[:, 0]
        states[t], actions[t], log_probs[t] = obs, act, logp
        rewards[t], dones[t], values[t] = rew, done, val
        obs = nxt
    bootstrap = mlp_apply(artifact.critic, obs)[:, 0]
    adv, ret = compute_gae(rewards, values, dones, bootstrap, gamma, lam)
    buffer.write(
        offset,
        states=states.reshape(-1, sdim), actions=actions.reshape(-1, adim),
        log_probs=log_probs.ravel(), rewards=rewards.ravel(), dones=dones.ravel(),
        values=values.ravel(), advantages=adv.ravel(), returns=ret.ravel(),
    )
    return buffer


# ---------------------------------------------------------------------------
# learner fusion


def fuse_parameters(artifacts) -> AgentArtifact:
    """Elementwise mean of all parameters and Adam moments; ``t`` is the max.

    Values are sorted per coordinate and averaged as offsets from the
    smallest, so the result does not depend on the order of ``artifacts``
    and fusing identical copies returns them bit for bit.
    """
    artifacts = list(artifacts)
    if not artifacts:
        raise UsageError("fuse_parameters needs at least one artifact")
    if len(artifacts) == 1:
        return artifacts[0]
    sig = artifacts[0].shape_signature()
    for i, a in enumerate(artifacts[1:], start=1):
        if a.shape_signature() != sig:
            raise UsageError(f"artifact {i} shapes {a.shape_signature()} differ from artifact 0 {sig}")

    def mean(stack):
        ordered = np.sort(np.stack(stack), axis=0)
        return ordered[0] + (ordered - ordered[0]).mean(axis=0)

    params = mean([a.flat_params() for a in artifacts])
    opt = replace(
        artifacts[0].optimizer,
        m=mean([a.optimizer.m for a in artifacts]),
        v=mean([a.optimizer.v for a in artifacts]),
        t=max(a.optimizer.t for a in artifacts),
    )
    return replace(artifacts[0].with_flat_params(params), optimizer=opt)


# ---------------------------------------------------------------------------
# evaluator


def _episode_returns(actor, venv, deterministic: bool, rng) -> np.ndarray:
    n = venv.num_envs
    totals = np.zeros(n)
    finished = np.zeros(n, dtype=bool)
    obs = venv.observe()
    limit = getattr(venv.spec, "max_episode_steps", 10_000) + 1
    for _ in range(limit):
        act = actor.mean(obs) if deterministic else policy_sample(actor, obs, rng)[0]
        obs, rew, done, _ = venv.step(act)
        totals += np.where(finished, 0.0, rew)
        finished |= done
        if finished.all():
            break
    return totals


def evaluate(actor, env_factory: EnvFactory, episodes: int, seed: int,
             deterministic: bool = True, episode_seeds=None,
             env_steps: int = 0, wall_seconds: float = 0.0) -> EvaluationRecord:
    """Run ``episodes`` episodes and summarize their undiscounted returns.

    By default all episodes run side by side in one batched env whose
    sub-env ``i`` is seeded from ``(seed, i)``.  ``episode_seeds`` instead
    runs one single-env episode per listed seed.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    if episode_seeds is None:
        returns = _episode_returns(actor, env_factory(episodes, seed), deterministic, rng)
    else:
        if len(episode_seeds) != episodes:
            raise ValueError("need one seed per episode")
        returns = np.array([
            _episode_returns(actor, env_factory(1, s), deterministic, rng)[0] for s in episode_seeds
        ])
    return EvaluationRecord.from_rewards(returns, wall_seconds, env_steps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PodResult:
    final: AgentArtifact
    best: AgentArtifact
    history: list
    env_steps: int
    stop_reason: str
    pod_id: str = ""


CURVE_HEADER = ("wall_seconds", "env_steps", "reward_mean", "reward_std")


class CurveWriter:
    """Append-only ``wall_seconds,env_steps,reward_mean,reward_std`` CSV."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CURVE_HEADER)

    def append(self, rec: EvaluationRecord) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [f"{rec.wall_seconds:.6f}", rec.env_steps, repr(rec.mean), repr(rec.std)]
            )
            fh.flush()


def pod_seeds(seed: int, config: PodConfig) -> dict:
    """Every random stream a pod uses, derived from one integer seed."""
    root = np.random.SeedSequence(seed)
    env_ss, worker_ss, learner_ss, _ = root.spawn(4)
    return {
        "env": [int(s.generate_state(1)[0]) for s in env_ss.spawn(config.num_workers)],
        "worker": [np.random.default_rng(s) for s in worker_ss.spawn(config.num_workers)],
        "learner": [np.random.default_rng(s) for s in learner_ss.spawn(config.num_learners)],
    }


def eval_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(3, index)).generate_state(1)[0])


def pod_train(config: PodConfig, init: AgentArtifact, env_factory: EnvFactory,
              ppo: PpoConfig = PpoConfig(), seed: int = 0, pod_id: str = "pod",
              stop_event: Optional[threading.Event] = None, curve_path=None,
              learner_hook: Optional[Callable] = None, snapshot_hook: Optional[Callable] = None) -> PodResult:
    config.check(ppo)
    streams = pod_seeds(seed, config)
    try:
        venvs = [env_factory(config.envs_per_worker, s) for s in streams["env"]]
    except Exception as exc:
        raise PodError(f"pod {pod_id}: environment construction failed: {exc}") from exc
    spec = venvs[0].spec
    if init.state_dim != spec.state_dim or init.action_dim != spec.action_dim:
        raise PodError(
            f"pod {pod_id}: artifact dims ({init.state_dim}, {init.action_dim}) do not match "
            f"env ({spec.state_dim}, {spec.action_dim})"
        )
    update = learner_hook or ppo_update
    writer = CurveWriter(curve_path) if curve_path else None
    seg = config.envs_per_worker * config.rollout_horizon
    pool = ThreadPoolExecutor(max(config.num_workers, config.num_learners)) if config.parallel else None
    eval_pool = ThreadPoolExecutor(1) if config.parallel else None

    start = time.perf_counter()
    artifact = replace(init, agent_id=init.agent_id or pod_id)
    history: list[EvaluationRecord] = []
    pending: list[tuple[Future, AgentArtifact]] = []
    best: Optional[AgentArtifact] = None
    env_steps = 0
    last_eval = 0
    n_evals = 0
    stop_reason = ""

    def run_eval(snap: AgentArtifact, steps: int, wall: float, index: int) -> EvaluationRecord:
        return evaluate(snap.actor, env_factory, config.eval_episodes, eval_seed(seed, index),
                        deterministic=not config.sampled_eval, env_steps=steps, wall_seconds=wall)

    def absorb(rec: EvaluationRecord, snap: AgentArtifact) -> None:
        nonlocal best
        history.append(rec)
        if writer:
            writer.append(rec)
        scored = replace(snap, score=rec.mean, env_steps=rec.env_steps)
        if snapshot_hook:
            snapshot_hook(scored, rec)
        if best is None or rec.mean > best.score:
            best = scored

    def drain(wait: bool) -> None:
        while pending and (wait or pending[0][0].done()):
            fut, snap = pending.pop(0)
            absorb(fut.result(), snap)

    def snapshot() -> None:
        nonlocal n_evals, last_eval
        wall = time.perf_counter() - start
        idx = n_evals
        n_evals += 1
        last_eval = env_steps
        snap = artifact
        if eval_pool:
            pending.append((eval_pool.submit(run_eval, snap, env_steps, wall, idx), snap))
        else:
            absorb(run_eval(snap, env_steps, wall, idx), snap)

    try:
        while True:
            if stop_event is not None and stop_event.is_set():
                stop_reason = "stop_event"
                break
            buffer = TransitionBuffer(ppo.buffer_size, spec.state_dim, spec.action_dim)
            jobs = [
                (artifact, venvs[w], config.rollout_horizon, streams["worker"][w],
                 ppo.gamma, ppo.gae_lambda, buffer, w * seg)
                for w in range(config.num_workers)
            ]
            if pool:
                for f in [pool.submit(worker_collect, *j) for j in jobs]:
                    f.result()
            else:
                for j in jobs:
                    worker_collect(*j)
            buffer.freeze()

            if pool:
                futs = [pool.submit(update, artifact, buffer, ppo, rng) for rng in streams["learner"]]
                results = [f.result()[0] for f in futs]
            else:
                results = [update(artifact, buffer, ppo, rng)[0] for rng in streams["learner"]]
            artifact = replace(fuse_parameters(results), env_steps=env_steps + ppo.buffer_size)
            env_steps += ppo.buffer_size

            if env_steps - last_eval >= config.eval_interval_steps:
                snapshot()
            drain(wait=False)

            if env_steps >= config.stop.max_steps:
                stop_reason = "max_steps"
            elif time.perf_counter() - start >= config.stop.max_seconds:
                stop_reason = "max_seconds"
            elif best is not None and best.score >= config.stop.target_reward:
                stop_reason = "target_reward"
            if stop_reason:
                break
        if last_eval != env_steps or n_evals == 0:
            snapshot()
        drain(wait=True)
    finally:
        if pool:
            pool.shutdown(wait=True)
        if eval_pool:
            eval_pool.shutdown(wait=True)

    final = replace(artifact, score=history[-1].mean, env_steps=env_steps)
    log.debug("pod %s stopped (%s) after %d steps, best %.3f", pod_id, stop_reason, env_steps, best.score)
    return PodResult(final, best, history, env_steps, stop_reason, pod_id)
