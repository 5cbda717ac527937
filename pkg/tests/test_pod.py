import csv
import math
import threading
from dataclasses import replace

import numpy as np
import pytest

from podracer.agent import make_artifact
from podracer.envs import EnvSpec, pointmass_factory
from podracer.pod import (
    CURVE_HEADER,
    EvaluationRecord,
    PodConfig,
    PodError,
    StopConfig,
    eval_seed,
    evaluate,
    fuse_parameters,
    pod_seeds,
    pod_train,
    worker_collect,
)
from podracer.ppo import CapacityError, PpoConfig, TransitionBuffer, compute_gae, ppo_update
from podracer.tensor_core import UsageError, mlp_apply, policy_sample

FACTORY = pointmass_factory()
SMALL_PPO = PpoConfig(buffer_size=256, minibatch_size=64, epochs_per_update=2)


def small_pod(**kw):
    stop = kw.pop("stop", StopConfig(max_steps=1024))
    base = dict(num_workers=2, envs_per_worker=8, num_learners=2, rollout_horizon=16,
                eval_episodes=3, eval_interval_steps=256, stop=stop)
    base.update(kw)
    return PodConfig(**base)


def fresh(seed=0):
    return make_artifact(6, 2, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# worker


def test_collect_counts():
    buf = worker_collect(fresh(), FACTORY(4, 0), 1, np.random.default_rng(0))
    assert len(buf) == 4 and buf.full


def test_collect_overflow():
    buf = TransitionBuffer(10, 6, 2)
    with pytest.raises(CapacityError):
        worker_collect(fresh(), FACTORY(4, 0), 2, np.random.default_rng(0), buffer=buf, offset=4)


def test_collect_deterministic_policy_is_reproducible():
    art = fresh()
    art = replace(art, actor=replace(art.actor, log_std=np.full(2, -20.0)))
    a = worker_collect(art, FACTORY(4, 7), 30, np.random.default_rng(1))
    b = worker_collect(art, FACTORY(4, 7), 30, np.random.default_rng(1))
    for name in TransitionBuffer.FIELDS:
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_collect_matches_replay():
    art = fresh(3)
    horizon, n = 40, 3
    buf = worker_collect(art, FACTORY(n, 5), horizon, np.random.default_rng(9), gamma=0.9, lam=0.8)
    venv, rng = FACTORY(n, 5), np.random.default_rng(9)
    obs = venv.observe()
    rewards, values, dones = [], [], []
    for t in range(horizon):
        act, logp = policy_sample(art.actor, obs, rng)
        rows = slice(t * n, (t + 1) * n)
        assert np.array_equal(buf.states[rows], obs)
        assert np.array_equal(buf.actions[rows], act)
        assert np.array_equal(buf.log_probs[rows], logp)
        values.append(mlp_apply(art.critic, obs)[:, 0])
        obs, rew, done, _ = venv.step(act)
        rewards.append(rew)
        dones.append(done)
        assert np.array_equal(buf.rewards[rows], rew) and np.array_equal(buf.dones[rows], done)
    adv, _ = compute_gae(np.array(rewards), np.array(values), np.array(dones),
                         mlp_apply(art.critic, obs)[:, 0], 0.9, 0.8)
    np.testing.assert_allclose(buf.advantages, adv.ravel(), rtol=0, atol=1e-12)


def test_truncated_episode_reward_bootstraps():
    art = fresh(1)
    factory = pointmass_factory(max_episode_steps=5)
    buf = worker_collect(art, factory(2, 0), 5, np.random.default_rng(0), gamma=0.5)
    venv = factory(2, 0)
    rng = np.random.default_rng(0)
    obs = venv.observe()
    for _ in range(5):
        act, _ = policy_sample(art.actor, obs, rng)
        obs, rew, done, info = venv.step(act)
    expected = rew + 0.5 * mlp_apply(art.critic, info["terminal_obs"])[:, 0]
    assert info["truncated"].all()
    np.testing.assert_allclose(buf.rewards[-2:], expected, atol=1e-14)


def test_worker_segments_partition_the_buffer():
    cfg = small_pod()
    buf = TransitionBuffer(cfg.buffer_size, 6, 2)
    seg = cfg.envs_per_worker * cfg.rollout_horizon
    for w in range(cfg.num_workers):
        assert buf._filled[w * seg:(w + 1) * seg].sum() == 0
        worker_collect(fresh(), FACTORY(cfg.envs_per_worker, w), cfg.rollout_horizon,
                       np.random.default_rng(w), buffer=buf, offset=w * seg)
    assert buf.full and len(buf) == cfg.buffer_size


# ---------------------------------------------------------------------------
# fusion


def test_fuse_single_is_identity():
    a = fresh()
    assert fuse_parameters([a]) is a


def test_fuse_opposite_weights_cancel():
    a = fresh(1)
    b = a.with_flat_params(-a.flat_params())
    assert np.all(fuse_parameters([a, b]).flat_params() == 0)


def test_fuse_matches_mean_oracle_and_is_permutation_invariant():
    rng = np.random.default_rng(0)
    arts = []
    for i in range(5):
        a = fresh(i)
        n = a.num_params
        opt = replace(a.optimizer, m=rng.standard_normal(n), v=rng.random(n), t=int(rng.integers(1, 50)))
        arts.append(replace(a, optimizer=opt))
    fused = fuse_parameters(arts)
    oracle = sum(a.flat_params() for a in arts) / 5
    np.testing.assert_allclose(fused.flat_params(), oracle, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fused.optimizer.m, sum(a.optimizer.m for a in arts) / 5, atol=1e-12)
    np.testing.assert_allclose(fused.optimizer.v, sum(a.optimizer.v for a in arts) / 5, atol=1e-12)
    assert fused.optimizer.t == max(a.optimizer.t for a in arts)
    shuffled = fuse_parameters([arts[i] for i in rng.permutation(5)])
    assert shuffled.flat_params().tobytes() == fused.flat_params().tobytes()
    same = fuse_parameters([arts[0]] * 3)
    assert np.array_equal(same.flat_params(), arts[0].flat_params())


def test_fuse_errors():
    with pytest.raises(UsageError):
        fuse_parameters([])
    with pytest.raises(UsageError):
        fuse_parameters([fresh(), make_artifact(6, 2, np.random.default_rng(0), hidden=(8,))])


# ---------------------------------------------------------------------------
# evaluator


class FixedRewardEnv:
    """Every episode lasts one step and pays ``i + 1`` in sub-env ``i``."""

    def __init__(self, n):
        self.num_envs = n
        self.spec = EnvSpec(6, 2, -np.ones(2), np.ones(2), 1)

    def observe(self):
        return np.zeros((self.num_envs, 6))

    def step(self, actions):
        return self.observe(), np.arange(1.0, self.num_envs + 1), np.ones(self.num_envs, dtype=bool), {}


def test_evaluate_fake_env_arithmetic():
    rec = evaluate(fresh().actor, lambda n, s: FixedRewardEnv(n), 3, seed=0)
    assert rec.episodic_rewards == (1.0, 2.0, 3.0)
    assert rec.mean == 2.0
    assert rec.std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)


def test_evaluate_record_is_consistent():
    rec = evaluate(fresh().actor, FACTORY, 10, seed=4)
    assert len(rec.episodic_rewards) == 10
    assert rec.mean == float(np.mean(rec.episodic_rewards))
    assert rec.std == float(np.std(rec.episodic_rewards))


def test_identical_seeds_give_zero_std():
    rec = evaluate(fresh().actor, FACTORY, 4, seed=0, episode_seeds=[7, 7, 7, 7])
    assert rec.std == 0.0


def test_evaluate_rejects_zero_episodes():
    with pytest.raises(ValueError):
        evaluate(fresh().actor, FACTORY, 0, seed=0)


def test_record_from_rewards_population_std():
    rec = EvaluationRecord.from_rewards([1.0, 5.0])
    assert rec.std == 2.0


# ---------------------------------------------------------------------------
# pod_train


def test_one_update_when_budget_is_one_buffer():
    calls = []

    def hook(art, buf, cfg, rng):
        calls.append(len(buf))
        return ppo_update(art, buf, cfg, rng)

    cfg = small_pod(stop=StopConfig(max_steps=256))
    res = pod_train(cfg, fresh(), FACTORY, SMALL_PPO, seed=0, learner_hook=hook)
    assert calls == [256, 256]  # one epoch, two learners
    assert res.env_steps == 256 and res.stop_reason == "max_steps"


def test_single_learner_equals_direct_ppo_loop():
    cfg = small_pod(num_learners=1, num_workers=1, envs_per_worker=16)
    res = pod_train(cfg, fresh(), FACTORY, SMALL_PPO, seed=11)

    streams = pod_seeds(11, cfg)
    venv = FACTORY(16, streams["env"][0])
    art = replace(fresh(), agent_id="pod")
    history = []
    for i in range(4):
        buf = worker_collect(art, venv, 16, streams["worker"][0], SMALL_PPO.gamma, SMALL_PPO.gae_lambda)
        buf.freeze()
        art, _ = ppo_update(art, buf, SMALL_PPO, streams["learner"][0])
        history.append(evaluate(art.actor, FACTORY, 3, eval_seed(11, i)).mean)
    assert [r.mean for r in res.history] == history
    assert res.final.flat_params().tobytes() == art.flat_params().tobytes()


def test_history_monotone_and_best_dominates_final():
    res = pod_train(small_pod(), fresh(), FACTORY, SMALL_PPO, seed=1)
    steps = [r.env_steps for r in res.history]
    walls = [r.wall_seconds for r in res.history]
    assert steps == sorted(steps) and walls == sorted(walls)
    assert res.best.score == max(r.mean for r in res.history)
    assert res.best.score >= res.final.score == res.history[-1].mean


def test_learners_see_read_only_buffer():
    seen = []

    def hook(art, buf, cfg, rng):
        with pytest.raises(ValueError):
            buf.states[0, 0] = 1.0
        seen.append(id(buf))
        return ppo_update(art, buf, cfg, rng)

    pod_train(small_pod(stop=StopConfig(max_steps=512)), fresh(), FACTORY, SMALL_PPO, learner_hook=hook)
    assert len(seen) == 4 and seen[0] == seen[1] and seen[2] == seen[3]


def test_parallel_mode_matches_serial():
    a = pod_train(small_pod(), fresh(), FACTORY, SMALL_PPO, seed=5)
    b = pod_train(small_pod(parallel=True), fresh(), FACTORY, SMALL_PPO, seed=5)
    assert [r.mean for r in a.history] == [r.mean for r in b.history]
    assert a.final.flat_params().tobytes() == b.final.flat_params().tobytes()


def test_stop_conditions():
    r = pod_train(small_pod(stop=StopConfig(max_steps=10**6, target_reward=-math.inf)), fresh(), FACTORY,
                  SMALL_PPO)
    assert r.stop_reason == "target_reward" and r.env_steps == 256
    r = pod_train(small_pod(stop=StopConfig(max_steps=10**6, max_seconds=0.0)), fresh(), FACTORY, SMALL_PPO)
    assert r.stop_reason == "max_seconds" and r.env_steps == 256
    ev = threading.Event()
    ev.set()
    r = pod_train(small_pod(), fresh(), FACTORY, SMALL_PPO, stop_event=ev)
    assert r.stop_reason == "stop_event" and r.env_steps == 0 and len(r.history) == 1


def test_curve_csv(tmp_path):
    path = tmp_path / "curve.csv"
    res = pod_train(small_pod(), fresh(), FACTORY, SMALL_PPO, curve_path=path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CURVE_HEADER
    assert [int(r[1]) for r in rows[1:]] == [h.env_steps for h in res.history]
    assert [float(r[2]) for r in rows[1:]] == [h.mean for h in res.history]


def test_buffer_size_mismatch_and_env_failure():
    with pytest.raises(ValueError, match="ppo.buffer_size"):
        pod_train(small_pod(rollout_horizon=8), fresh(), FACTORY, SMALL_PPO)

    def broken(n, s):
        raise RuntimeError("simulator offline")

    with pytest.raises(PodError, match="pod-007"):
        pod_train(small_pod(), fresh(), broken, SMALL_PPO, pod_id="pod-007")
    with pytest.raises(PodError, match="dims"):
        pod_train(small_pod(), make_artifact(5, 2, np.random.default_rng(0)), FACTORY, SMALL_PPO)
