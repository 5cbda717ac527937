import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from podracer.agent import make_artifact
from podracer.algos import ALGORITHMS, get_algorithm
from podracer.checkpoint import load_checkpoint_with_meta, save_checkpoint
from podracer.cli import main
from podracer.tournament import concurrency_trace, read_event_log

TINY = """\
task = pointmass
seed = 0
agent.hidden = 16, 16
pod.num_workers = 1
pod.envs_per_worker = 8
pod.num_learners = 1
pod.rollout_horizon = 16
pod.eval_episodes = 2
pod.eval_interval_steps = 128
pod.stop.max_steps = 256
ppo.buffer_size = 128
ppo.minibatch_size = 64
ppo.epochs_per_update = 1
pool.generator.top_k = 2
"""


def write_config(tmp_path, extra="", pods=1, slots=1, name="exp.conf"):
    path = tmp_path / name
    path.write_text(TINY + f"pool.max_pods = {slots}\npool.total_slots = {slots}\n"
                    f"pool.pods_spawned_limit = {pods}\n" + extra)
    return path


def curve_rows(path):
    with open(path) as fh:
        return [row[1:] for row in csv.reader(fh)]  # drop wall_seconds


def test_run_single_pod_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(write_config(tmp_path)), "--output", str(out), "--serial"]) == 0
    assert os.listdir(out / "curves") == ["pod-000.csv"]
    assert (out / "summary.txt").read_text().startswith("# podracer run summary")
    ckpts = os.listdir(out / "leaderboard")
    assert ckpts == ["rank-00-pod-000.ckpt"]
    art, meta = load_checkpoint_with_meta(out / "leaderboard" / ckpts[0])
    assert meta["pod_id"] == "pod-000" and art.agent_id == "pod-000"
    assert (out / "config.effective.txt").exists() and (out / "events.csv").exists()
    assert "status: budget_exhausted" in capsys.readouterr().out


def test_serial_runs_are_identical(tmp_path):
    cfg = write_config(tmp_path, pods=3, slots=2)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["run", str(cfg), "--output", str(out), "--serial", "--seed", "5"]) == 0
    a, b = outs
    assert (a / "summary.txt").read_text() == (b / "summary.txt").read_text()
    names = sorted(os.listdir(a / "curves"))
    assert names == sorted(os.listdir(b / "curves")) and len(names) == 3
    for n in names:
        assert curve_rows(a / "curves" / n) == curve_rows(b / "curves" / n)


def test_seed_flag_changes_run(tmp_path):
    cfg = write_config(tmp_path)
    main(["run", str(cfg), "--output", str(tmp_path / "a"), "--serial", "--seed", "1"])
    main(["run", str(cfg), "--output", str(tmp_path / "b"), "--serial", "--seed", "2"])
    assert (tmp_path / "a" / "summary.txt").read_text() != (tmp_path / "b" / "summary.txt").read_text()


def test_replay_slots_caps_concurrency(tmp_path):
    sched = tmp_path / "slots.txt"
    sched.write_text("0 4\n1 2\n3 4\n")
    out = tmp_path / "out"
    code = main(["run", str(write_config(tmp_path, pods=6, slots=4)), "--output", str(out),
                 "--serial", "--replay-slots", str(sched)])
    assert code == 0
    trace = concurrency_trace(read_event_log(out / "events.csv"))
    assert all(running <= cap for _, running, cap in trace)
    assert {cap for _, _, cap in trace} >= {2, 4}


def test_output_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("PODRACER_OUTPUT", str(tmp_path / "env-out"))
    assert main(["run", str(write_config(tmp_path)), "--serial"]) == 0
    assert (tmp_path / "env-out" / "summary.txt").exists()


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("ppo.learning_rat = 1\n")
    assert main(["run", str(bad), "--output", str(tmp_path / "o")]) == 2
    assert "nearest known key is 'ppo.learning_rate'" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.conf")]) == 2
    planned = write_config(tmp_path, "agent.algo = sac\n", name="sac.conf")
    assert main(["run", str(planned), "--output", str(tmp_path / "o")]) == 2
    assert "no implementation" in capsys.readouterr().err
    starve = tmp_path / "zero.txt"
    starve.write_text("0 0\n")
    code = main(["run", str(write_config(tmp_path)), "--output", str(tmp_path / "z"), "--serial",
                 "--replay-slots", str(starve)])
    assert code == 3


def test_algorithm_registry():
    assert ALGORITHMS[0] == "ppo" and get_algorithm("ppo").name == "ppo"
    for name in ("dqn", "ddpg", "td3", "sac"):
        with pytest.raises(NotImplementedError):
            get_algorithm(name)
    with pytest.raises(KeyError):
        get_algorithm("a2c")


def test_stock_pipeline(tmp_path, capsys):
    data = tmp_path / "prices.csv"
    assert main(["synth-data", str(data), "--periods", "400", "--tickers", "AAA,BBB"]) == 0
    cfg = write_config(tmp_path, "data.csv = prices.csv\ndata.train_start = 2016-01-01\ndata.train_end = 2016-10-31\n"
                       "data.test_start = 2016-11-01\ndata.test_end = 2017-12-31\n", pods=2, slots=2)
    cfg.write_text(cfg.read_text().replace("task = pointmass", "task = stock"))
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--output", str(out), "--serial"]) == 0
    for name in ("report.csv", "equity.csv", "trades.csv", "report.txt", "return_vs_time.csv"):
        assert (out / "backtest" / name).exists(), name
    ckpt = sorted((out / "leaderboard").iterdir())[0]
    capsys.readouterr()

    assert main(["backtest", str(ckpt), str(cfg), "--output", str(tmp_path / "bt")]) == 0
    assert "Sharpe ratio" in capsys.readouterr().out
    with open(tmp_path / "bt" / "backtest" / "equity.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["timestamp", "account_value"] and float(rows[1][1]) == 1_000_000.0
    assert rows[1][0].startswith("2016-11-01")

    assert main(["eval", str(ckpt), str(cfg), "--episodes", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "episode,reward" and len(lines) == 1 + 3 + 2


def test_eval_checkpoint_handling(tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", str(write_config(tmp_path)), "--output", str(out), "--serial"])
    ckpt = out / "leaderboard" / "rank-00-pod-000.ckpt"
    assert main(["eval", str(ckpt), str(write_config(tmp_path, name="b.conf")), "--episodes", "2"]) == 0
    wide = write_config(tmp_path, name="c.conf")
    wide.write_text(wide.read_text().replace("agent.hidden = 16, 16", "agent.hidden = 8"))
    # weights are taken from the checkpoint, so the hidden width in the config does not matter
    assert main(["eval", str(ckpt), str(wide), "--episodes", "2"]) == 0
    corrupt = tmp_path / "bad.ckpt"
    corrupt.write_bytes(ckpt.read_bytes()[:-1] + b"\x00")
    assert main(["eval", str(corrupt), str(wide)]) == 2
    other = tmp_path / "other.ckpt"
    save_checkpoint(make_artifact(9, 3, np.random.default_rng(0)), other)
    assert main(["eval", str(other), str(wide)]) == 2
    assert "do not match" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "podracer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth-data" in proc.stdout
