"""Command-line entry point: ``podracer run | backtest | eval | synth-data``.

Exit status: 0 when a run ends with its target reached or its spawn budget
spent, 1 on runtime errors, 2 on bad configuration or input files, 3 when
the pool starved (no slots ever became available) and 130 after an
interrupt (outputs are still flushed).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import signal
import sys

from .algos import get_algorithm
from .checkpoint import CheckpointError, load_checkpoint_with_meta, save_checkpoint
from .config import ConfigError, ExperimentConfig, echo_config, parse_config, with_overrides
from .envs import compute_indicators, load_ohlcv, pointmass_factory, stock_factory, synthetic_market, write_ohlcv
from .envs.market import DataError, FormatError, OrderingError, TickerLookupError
from .metrics import (
    backtest_snapshots,
    run_backtest,
    write_equity_csv,
    write_report_csv,
    write_trades_csv,
)
from .pod import evaluate
from .tournament import EventLog, Orchestrator, ResourceMonitor, load_schedule

log = logging.getLogger("podracer")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_STARVED, EXIT_INTERRUPTED = 0, 1, 2, 3, 130
_STATUS_EXIT = {"target_reached": EXIT_OK, "budget_exhausted": EXIT_OK,
                "starved": EXIT_STARVED, "interrupted": EXIT_INTERRUPTED}
INPUT_ERRORS = (ConfigError, CheckpointError, FormatError, OrderingError, DataError, TickerLookupError,
                FileNotFoundError)

SUMMARY_FILE = "summary.txt"
EVENTS_FILE = "events.csv"
CONFIG_ECHO = "config.effective.txt"


def resolve_output(cfg: ExperimentConfig, flag) -> str:
    out = flag or cfg.output_dir or os.environ.get("PODRACER_OUTPUT") or "podracer-output"
    return os.path.abspath(out)


def load_market(cfg: ExperimentConfig):
    """Full market history with indicators computed before any split."""
    data = load_ohlcv(cfg.data.csv, cfg.data.tickers or None)
    return compute_indicators(data)


def build_task(cfg: ExperimentConfig):
    """``(env_factory, make_fresh)`` for the configured training task."""
    if cfg.task == "stock":
        train = cfg.data.split.train(load_market(cfg))
        factory = stock_factory(train, cfg.stock)
    else:
        factory = pointmass_factory()
    spec = factory(1, 0).spec
    algo = get_algorithm(cfg.agent.algo)

    def make_fresh(rng):
        return algo.make_artifact(spec.state_dim, spec.action_dim, rng, hidden=cfg.agent.hidden,
                                  lr=cfg.ppo.learning_rate, init_log_std=cfg.agent.init_log_std)

    return factory, make_fresh


def run_experiment(cfg: ExperimentConfig, output_dir: str, replay_slots=None) -> str:
    """Train a pool of pods and write every artifact; returns the run status."""
    os.makedirs(os.path.join(output_dir, "curves"), exist_ok=True)
    with open(os.path.join(output_dir, CONFIG_ECHO), "w") as fh:
        fh.write(echo_config(cfg))
    factory, make_fresh = build_task(cfg)
    if replay_slots:
        monitor = ResourceMonitor(cfg.pool.total_slots, schedule=load_schedule(replay_slots))
    else:
        monitor = ResourceMonitor(cfg.pool.total_slots, cfg.monitor.control_file or None,
                                  poll_interval=cfg.monitor.poll_interval)
    events = EventLog(os.path.join(output_dir, EVENTS_FILE))
    orch = Orchestrator(cfg.pool, factory, cfg.pod, make_fresh, cfg.ppo, monitor, seed=cfg.seed,
                        serial=cfg.serial, events=events, curve_dir=os.path.join(output_dir, "curves"))

    def on_signal(signum, _frame):
        log.warning("signal %d received; stopping pods and flushing outputs", signum)
        orch.interrupt()

    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            previous[sig] = signal.signal(sig, on_signal)
        except ValueError:  # not on the main thread
            pass
    try:
        summary = orch.run()
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)

    with open(os.path.join(output_dir, SUMMARY_FILE), "w") as fh:
        fh.write(summary.to_text())
    ckpt_dir = os.path.join(output_dir, "leaderboard")
    os.makedirs(ckpt_dir, exist_ok=True)
    for rank, entry in enumerate(summary.leaderboard.entries):
        wall = entry.eval_record.wall_seconds if entry.eval_record else 0.0
        save_checkpoint(entry.artifact, os.path.join(ckpt_dir, f"rank-{rank:02d}-{entry.pod_id}.ckpt"),
                        {"rank": rank, "pod_id": entry.pod_id, "wall_seconds": wall})
    if cfg.task == "stock" and summary.leaderboard.entries:
        write_backtest(summary.leaderboard.entries[0].artifact, cfg, os.path.join(output_dir, "backtest"))
        rows = backtest_snapshots(ckpt_dir, load_market(cfg), cfg.data.split, cfg.backtest_config())
        with open(os.path.join(output_dir, "backtest", "return_vs_time.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["wall_seconds", "env_steps", "cumulative_return", "checkpoint"])
            for wall, steps, ret, path in rows:
                w.writerow([f"{wall:.6f}", steps, repr(ret), os.path.basename(path)])
    return summary.status


def write_backtest(artifact, cfg: ExperimentConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    curve, report, trades = run_backtest(artifact, load_market(cfg), cfg.data.split, cfg.backtest_config())
    report_path = os.path.join(out_dir, "report.csv")
    if os.path.exists(report_path):
        os.remove(report_path)
    write_report_csv(report, report_path, artifact.agent_id or "agent")
    write_equity_csv(curve, os.path.join(out_dir, "equity.csv"))
    write_trades_csv(trades, os.path.join(out_dir, "trades.csv"))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report.table() + "\n")
    return report


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = with_overrides(parse_config(args.config), args.seed, args.output, args.serial)
    out = resolve_output(cfg, args.output)
    status = run_experiment(cfg, out, args.replay_slots)
    print(f"status: {status}")
    print(f"outputs: {out}")
    return _STATUS_EXIT.get(status, EXIT_ERROR)


def cmd_backtest(args) -> int:
    cfg = parse_config(args.config)
    if cfg.task != "stock":
        raise ConfigError(f"backtest needs task = stock, config has task = {cfg.task}")
    artifact, _ = load_checkpoint_with_meta(args.checkpoint)
    out = os.path.join(resolve_output(cfg, args.output), "backtest")
    report = write_backtest(artifact, cfg, out)
    print(report.table())
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = with_overrides(parse_config(args.config), args.seed)
    artifact, _ = load_checkpoint_with_meta(args.checkpoint)
    factory, _ = build_task(cfg)
    spec = factory(1, 0).spec
    if (artifact.state_dim, artifact.action_dim) != (spec.state_dim, spec.action_dim):
        raise ConfigError(
            f"checkpoint dims ({artifact.state_dim}, {artifact.action_dim}) do not match task "
            f"{cfg.task} ({spec.state_dim}, {spec.action_dim})"
        )
    episodes = args.episodes or cfg.pod.eval_episodes
    rec = evaluate(artifact.actor, factory, episodes, cfg.seed, deterministic=not cfg.pod.sampled_eval)
    print("episode,reward")
    for i, r in enumerate(rec.episodic_rewards):
        print(f"{i},{r!r}")
    print(f"mean = {rec.mean!r}")
    print(f"std = {rec.std!r}")
    return EXIT_OK


def cmd_synth(args) -> int:
    data = synthetic_market(args.periods, tuple(args.tickers.split(",")), seed=args.seed, start=args.start)
    write_ohlcv(data, args.path)
    print(f"wrote {len(data)} rows x {len(data.tickers)} tickers to {args.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="podracer", description="Tournament-based ensemble PPO training.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train a pool of pods")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--output", help="output directory (fallback: $PODRACER_OUTPUT)")
    r.add_argument("--replay-slots", metavar="FILE", help="scripted 'time slots' schedule")
    r.add_argument("--serial", action="store_true", help="deterministic single-threaded scheduling")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("backtest", help="backtest a checkpoint on the held-out window")
    b.add_argument("checkpoint")
    b.add_argument("config")
    b.add_argument("--output")
    b.set_defaults(func=cmd_backtest)

    e = sub.add_parser("eval", help="evaluate a checkpoint's deterministic policy")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--seed", type=int)
    e.add_argument("--episodes", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth-data", help="write a synthetic OHLCV CSV")
    s.add_argument("path")
    s.add_argument("--periods", type=int, default=1970)
    s.add_argument("--tickers", default="AAA,BBB,CCC")
    s.add_argument("--start", default="2016-01-04")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotImplementedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
