"""Tournament-based ensemble training: leaderboard, generator, orchestrator.

The orchestrator keeps ``min(max_pods, slots)`` pods in the training pool.
Each finished pod submits its best snapshot to the leaderboard (the
updater); each new pod is seeded by the generator, which either creates a
fresh agent or copies and mutates one of the leaderboard's elite entries.

Two execution modes share the same control logic:

* ``serial=True``: virtual concurrency.  Spawned pods queue in FIFO order and
  the oldest one is trained to completion when the loop needs a completion
  event.  The schedule clock counts loop ticks (one per completion or idle
  poll), so runs are bit-for-bit reproducible from the seed.
* ``serial=False``: pods train on a thread pool; the clock is wall seconds.

Shrinking the slot count preempts the most recently spawned pods at once
(their spawn is refunded and their results are discarded), so the running
count in the event log never exceeds the current slot count.
"""
from __future__ import annotations

import bisect
import logging
import math
import os
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .agent import AgentArtifact, Lineage
from .pod import EvaluationRecord, PodConfig, PodResult, pod_train
from .ppo import PpoConfig

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# leaderboard


@dataclass(frozen=True)
class LeaderboardEntry:
    artifact: AgentArtifact
    score: float
    eval_record: Optional[EvaluationRecord]
    inserted_at: float
    pod_id: str
    seq: int = 0  # arrival order, breaks score ties (earlier ranks higher)


@dataclass(frozen=True)
class Leaderboard:
    capacity: int = 10
    entries: tuple = ()
    param_mean: Optional[np.ndarray] = None
    param_var: Optional[np.ndarray] = None
    arrivals: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def scores(self) -> list[float]:
        return [e.score for e in self.entries]

    @property
    def best_score(self) -> float:
        return self.entries[0].score if self.entries else -math.inf


def _population_stats(entries):
    if not entries:
        return None, None
    flat = np.stack([e.artifact.flat_params() for e in entries])
    return flat.mean(axis=0), flat.var(axis=0)


def leaderboard_update(board: Leaderboard, candidate: LeaderboardEntry):
    """Rank-insert ``candidate``; returns ``(board', inserted, rank)``."""
    if not math.isfinite(candidate.score):
        raise ValueError(f"candidate score must be finite, got {candidate.score}")
    candidate = replace(candidate, seq=board.arrivals)
    entries = list(board.entries)
    full = len(entries) >= board.capacity
    if full and not candidate.score > entries[-1].score:
        return replace(board, arrivals=board.arrivals + 1), False, None
    # after all equal scores, since those arrived earlier
    keys = [-e.score for e in entries]
    rank = bisect.bisect_right(keys, -candidate.score)
    entries.insert(rank, candidate)
    if len(entries) > board.capacity:
        entries.pop()
    mean, var = _population_stats(entries)
    return Leaderboard(board.capacity, tuple(entries), mean, var, board.arrivals + 1), True, rank


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorConfig:
    top_k: int = 3
    mutation_sigma: float = 0.01
    fresh_prob: float = 0.2

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("generator top_k must be >= 1")
        if self.mutation_sigma < 0 or not 0.0 <= self.fresh_prob <= 1.0:
            raise ValueError("mutation_sigma must be >= 0 and fresh_prob in [0, 1]")


def generate_pod_init(board: Leaderboard, config: GeneratorConfig, rng: np.random.Generator,
                      make_fresh: Callable[[np.random.Generator], AgentArtifact],
                      child_id: str = "") -> AgentArtifact:
    """Fresh agent, or a Gaussian-mutated copy of a uniformly chosen elite."""
    if not board.entries or rng.random() < config.fresh_prob:
        fresh = make_fresh(rng)
        return replace(fresh, agent_id=child_id, lineage=Lineage(None, None), score=None, env_steps=0)
    pick = int(rng.integers(min(config.top_k, len(board.entries))))
    parent = board.entries[pick].artifact
    mutation_seed = int(rng.integers(2**31))
    noise = np.random.default_rng(mutation_seed).standard_normal(parent.num_params)
    child = parent.with_flat_params(parent.flat_params() + config.mutation_sigma * noise)
    opt = replace(parent.optimizer, m=parent.optimizer.m.copy(), v=parent.optimizer.v.copy(), t=0)
    return replace(child, optimizer=opt, agent_id=child_id, lineage=Lineage(parent.agent_id, mutation_seed),
                   score=None, env_steps=0, buffer_snapshot=None)


class LeaderboardService:
    """Serializes updater/generator requests against one leaderboard."""

    def __init__(self, capacity: int = 10, events: Optional[EventLog] = None):
        self.board = Leaderboard(capacity)
        self.events = events
        self._lock = threading.Lock()
        self._active = 0
        self.max_active = 0
        self.best_trace: list[float] = []

    def _enter(self):
        self._lock.acquire()
        self._active += 1
        self.max_active = max(self.max_active, self._active)

    def _exit(self):
        self._active -= 1
        self._lock.release()

    def submit(self, entry: LeaderboardEntry):
        self._enter()
        try:
            self.board, inserted, rank = leaderboard_update(self.board, entry)
            if self.events:
                self.events.emit("insert" if inserted else "reject", entry.pod_id,
                                 f"score={entry.score:.6g} rank={rank}")
            self.best_trace.append(self.board.best_score)
            return inserted, rank
        finally:
            self._exit()

    def generate(self, config: GeneratorConfig, rng, make_fresh, child_id: str) -> AgentArtifact:
        self._enter()
        try:
            return generate_pod_init(self.board, config, rng, make_fresh, child_id)
        finally:
            self._exit()


# ---------------------------------------------------------------------------
# resources and events


def load_schedule(path) -> list[tuple[float, int]]:
    """``time slots`` pairs, one per line (comma or whitespace separated)."""
    sched = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'time slots', got {line!r}")
            sched.append((float(parts[0]), int(parts[1])))
    return sched


class ResourceMonitor:
    """Reports how many pod slots are currently available.

    Sources, first match wins: a scripted ``schedule`` of ``(time, slots)``
    steps evaluated at the caller's clock; a control file holding one
    integer, re-read at most every ``poll_interval`` wall seconds; otherwise
    ``default_slots``.
    """

    def __init__(self, default_slots: int = 4, control_file=None, schedule=None,
                 poll_interval: float = 5.0):
        self.default_slots = max(0, int(default_slots))
        self.control_file = control_file
        self.poll_interval = poll_interval
        self.schedule = None
        if schedule is not None:
            cleaned = []
            for t, s in sorted(schedule):
                if s < 0:
                    log.warning("schedule slot count %d at t=%s clamped to 0", s, t)
                    s = 0
                cleaned.append((float(t), int(s)))
            self.schedule = cleaned
        self._last_value = self.default_slots
        self._last_read = -math.inf

    def poll(self, now: float = 0.0) -> int:
        if self.schedule is not None:
            value = self.default_slots
            for t, s in self.schedule:
                if t <= now:
                    value = s
            return value
        if self.control_file is None:
            return self.default_slots
        wall = time.monotonic()
        if wall - self._last_read < self.poll_interval:
            return self._last_value
        self._last_read = wall
        try:
            with open(self.control_file) as fh:
                value = int(fh.read().strip())
        except FileNotFoundError:
            return self._last_value
        except ValueError:
            log.warning("malformed slot control file %s; keeping %d", self.control_file, self._last_value)
            return self._last_value
        if value < 0:
            log.warning("negative slot count %d in %s clamped to 0", value, self.control_file)
            value = 0
        self._last_value = value
        return value


class EventLog:
    """Append-only ``wall_seconds,event,pod_id,detail`` log."""

    HEADER = "wall_seconds,event,pod_id,detail"

    def __init__(self, path=None):
        self.path = path
        self.records: list[tuple[float, str, str, str]] = []
        self._start = time.perf_counter()
        self._lock = threading.Lock()
        if path:
            with open(path, "w") as fh:
                fh.write(self.HEADER + "\n")

    def emit(self, event: str, pod_id: str = "", detail: str = "") -> None:
        detail = str(detail).replace(",", ";").replace("\n", " ")
        with self._lock:
            rec = (time.perf_counter() - self._start, event, pod_id, detail)
            self.records.append(rec)
            if self.path:
                with open(self.path, "a") as fh:
                    fh.write(f"{rec[0]:.6f},{event},{pod_id},{detail}\n")


def read_event_log(path) -> list[tuple[float, str, str, str]]:
    out = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            wall, event, pod_id, detail = line.rstrip("\n").split(",", 3)
            out.append((float(wall), event, pod_id, detail))
    return out


def concurrency_trace(records, max_pods: Optional[int] = None):
    """Replay an event log; yields ``(event_index, running, slots)`` after each event.

    A pod occupies a slot from ``spawn`` until ``complete``, ``crash``,
    ``preempt`` or ``cancel``.
    """
    running = 0
    slots = math.inf
    out = []
    for i, (_, event, _, detail) in enumerate(records):
        if event == "spawn":
            running += 1
        elif event in ("complete", "crash", "preempt", "cancel"):
            running -= 1
        elif event == "slots":
            slots = int(detail.split("=")[1])
        cap = slots if max_pods is None else min(slots, max_pods)
        out.append((i, running, cap))
    return out


# ---------------------------------------------------------------------------
# orchestrator


@dataclass(frozen=True)
class PoolConfig:
    max_pods: int = 4
    total_slots: int = 4
    pods_spawned_limit: int = 8
    target_reward: float = math.inf
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    leaderboard_capacity: int = 10
    submit_every_eval: bool = False

    def __post_init__(self):
        if self.max_pods > self.total_slots:
            raise ValueError(
                f"pool.max_pods ({self.max_pods}) must not exceed pool.total_slots ({self.total_slots})"
            )
        if self.max_pods < 1 or self.pods_spawned_limit < 0:
            raise ValueError("pool.max_pods must be >= 1 and pool.pods_spawned_limit >= 0")


@dataclass
class PodRecord:
    pod_id: str
    seed: int
    parent_id: Optional[str]
    mutation_seed: Optional[int]
    status: str = "running"  # complete | crash | preempted | cancelled
    stop_reason: str = ""
    env_steps: int = 0
    best_score: Optional[float] = None
    error: str = ""
    init: Optional[AgentArtifact] = field(default=None, repr=False)


@dataclass
class RunSummary:
    status: str
    pods: list
    leaderboard: Leaderboard
    best_trace: list
    max_concurrent: int
    results: dict = field(default_factory=dict)  # pod_id -> PodResult

    @property
    def trained_pods(self) -> list:
        return [p for p in self.pods if p.status in ("complete", "crash")]

    def lineage_edges(self) -> list[tuple[str, str, Optional[int]]]:
        return [(p.pod_id, p.parent_id, p.mutation_seed) for p in self.pods if p.parent_id]

    def to_text(self) -> str:
        """Deterministic text summary (no wall-clock values)."""
        lines = [
            "# podracer run summary",
            f"status = {self.status}",
            f"pods_spawned = {len(self.pods)}",
            f"pods_trained = {len(self.trained_pods)}",
            f"best_score = {self.leaderboard.best_score!r}",
            f"max_concurrent = {self.max_concurrent}",
            "",
            "[leaderboard]",
            "rank,pod_id,score,env_steps,parent_id",
        ]
        for r, e in enumerate(self.leaderboard.entries):
            lines.append(f"{r},{e.pod_id},{e.score!r},{e.artifact.env_steps},{e.artifact.lineage.parent_id or ''}")
        lines += ["", "[lineage]", "child,parent,mutation_seed"]
        for child, parent, ms in self.lineage_edges():
            lines.append(f"{child},{parent},{ms}")
        lines += ["", "[pods]", "pod_id,seed,status,stop_reason,env_steps,best_score"]
        for p in self.pods:
            score = "" if p.best_score is None else repr(p.best_score)
            lines.append(f"{p.pod_id},{p.seed},{p.status},{p.stop_reason},{p.env_steps},{score}")
        return "\n".join(lines) + "\n"


def _best_record(result: PodResult) -> Optional[EvaluationRecord]:
    for rec in result.history:
        if rec.mean == result.best.score:
            return rec
    return None


class Orchestrator:
    def __init__(self, pool: PoolConfig, env_factory, pod_config: PodConfig,
                 make_fresh: Callable[[np.random.Generator], AgentArtifact],
                 ppo: PpoConfig = PpoConfig(), monitor: Optional[ResourceMonitor] = None,
                 seed: int = 0, serial: bool = True, events: Optional[EventLog] = None,
                 curve_dir=None, poll_seconds: float = 0.05,
                 pod_runner: Optional[Callable] = None):
        self.pool = pool
        self.env_factory = env_factory
        self.pod_config = pod_config
        self.ppo = ppo
        self.make_fresh = make_fresh
        self.monitor = monitor or ResourceMonitor(pool.total_slots)
        self.seed = seed
        self.serial = serial
        self.events = events or EventLog()
        self.curve_dir = curve_dir
        self.poll_seconds = poll_seconds
        self.pod_runner = pod_runner or pod_train
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        self.leaderboard = LeaderboardService(pool.leaderboard_capacity, self.events)
        self.records: list[PodRecord] = []
        self.results: dict[str, PodResult] = {}
        self._slots: Optional[int] = None
        self._next_index = 0
        self._spawned = 0
        self._max_concurrent = 0
        self._start = time.perf_counter()
        self.terminated = False
        self._interrupt = threading.Event()

    def interrupt(self) -> None:
        """Ask running pods to stop early; their results are still submitted."""
        self._interrupt.set()

    # -- helpers -----------------------------------------------------------

    def _poll(self, now: float) -> int:
        return max(0, min(self.monitor.poll(now), self.pool.total_slots))

    def _announce(self, slots: int) -> None:
        # logged after any preemption it causes, before any spawn it allows
        if slots != self._slots:
            self._slots = slots
            self.events.emit("slots", "", f"slots={slots}")

    def _spawn(self) -> PodRecord:
        idx = self._next_index
        self._next_index += 1
        self._spawned += 1
        pod_id = f"pod-{idx:03d}"
        pod_seed = int(np.random.SeedSequence(self.seed, spawn_key=(1, idx)).generate_state(1)[0])
        init = self.leaderboard.generate(self.pool.generator, self.rng, self.make_fresh, pod_id)
        rec = PodRecord(pod_id, pod_seed, init.lineage.parent_id, init.lineage.mutation_seed, init=init)
        self.records.append(rec)
        self.events.emit("spawn", pod_id, f"parent={rec.parent_id or ''}")
        return rec

    def _run_pod(self, rec: PodRecord, stop_event: Optional[threading.Event] = None) -> PodResult:
        curve = os.path.join(self.curve_dir, f"{rec.pod_id}.csv") if self.curve_dir else None
        hook = None
        if self.pool.submit_every_eval:
            def hook(snap, evrec, _rec=rec):
                self.leaderboard.submit(LeaderboardEntry(snap, evrec.mean, evrec, time.time(), _rec.pod_id))
        return self.pod_runner(self.pod_config, rec.init, self.env_factory, self.ppo, seed=rec.seed,
                               pod_id=rec.pod_id, stop_event=stop_event, curve_path=curve,
                               snapshot_hook=hook)

    def _finish(self, rec: PodRecord, result: Optional[PodResult], error: Optional[BaseException]) -> None:
        if error is not None:
            rec.status, rec.error = "crash", f"{type(error).__name__}: {error}"
            self.events.emit("crash", rec.pod_id, rec.error)
            log.warning("pod %s crashed: %s", rec.pod_id, rec.error)
            return
        rec.status = "complete"
        rec.stop_reason = result.stop_reason
        rec.env_steps = result.env_steps
        rec.best_score = result.best.score
        self.results[rec.pod_id] = result
        self.events.emit("complete", rec.pod_id, f"reason={result.stop_reason} best={result.best.score:.6g}")
        if self.terminated:
            return
        self.leaderboard.submit(LeaderboardEntry(result.best, result.best.score, _best_record(result),
                                                 time.time(), rec.pod_id))
        if self.leaderboard.board.best_score >= self.pool.target_reward:
            self.terminated = True
            self.events.emit("terminate", rec.pod_id, f"target_reward={self.pool.target_reward}")

    def _note_concurrency(self, running: int) -> None:
        self._max_concurrent = max(self._max_concurrent, running)

    # -- main loops --------------------------------------------------------

    def run(self) -> RunSummary:
        status = self._run_serial() if self.serial else self._run_threaded()
        if status != "target_reached" and not any(e[1] == "terminate" for e in self.events.records):
            self.events.emit("terminate", "", status)
        return RunSummary(status, self.records, self.leaderboard.board, list(self.leaderboard.best_trace),
                          self._max_concurrent, self.results)

    def _run_serial(self) -> str:
        running: deque[PodRecord] = deque()
        tick = 0
        idle = 0
        while True:
            slots = self._poll(tick)
            cap = min(self.pool.max_pods, slots)
            while len(running) > cap:
                self._preempt(running.pop(), slots)
            self._announce(slots)
            while len(running) < cap and self._spawned < self.pool.pods_spawned_limit:
                running.append(self._spawn())
                self._note_concurrency(len(running))
            if not running:
                if self._spawned >= self.pool.pods_spawned_limit:
                    return "budget_exhausted"
                idle += 1
                tick += 1
                if idle > 100_000:
                    return "starved"
                continue
            idle = 0
            rec = running.popleft()
            try:
                result, error = self._run_pod(rec, self._interrupt), None
            except Exception as exc:  # pod crash must not abort the run
                result, error = None, exc
            self._finish(rec, result, error)
            tick += 1
            if self.terminated or self._interrupt.is_set():
                for other in running:
                    other.status = "cancelled"
                    self.events.emit("cancel", other.pod_id, "terminated")
                return "target_reached" if self.terminated else "interrupted"

    def _preempt(self, rec: PodRecord, slots: int, stop: Optional[threading.Event] = None) -> None:
        rec.status = "preempted"
        self._spawned -= 1
        if stop is not None:
            stop.set()
        self.events.emit("preempt", rec.pod_id, f"slots={slots}")

    def _run_threaded(self) -> str:
        executor = ThreadPoolExecutor(self.pool.max_pods)
        running: dict = {}  # future -> (record, stop_event)
        order: list = []  # futures in spawn order
        zombies: list = []
        try:
            while True:
                now = time.perf_counter() - self._start
                if self._interrupt.is_set():
                    for _, stop in running.values():
                        stop.set()
                    if not running:
                        return "interrupted"
                elif not self.terminated:
                    slots = self._poll(now)
                    cap = min(self.pool.max_pods, slots)
                    while len(running) > cap:
                        fut = order.pop()
                        rec, stop = running.pop(fut)
                        self._preempt(rec, slots, stop)
                        zombies.append(fut)
                    self._announce(slots)
                    while len(running) < cap and self._spawned < self.pool.pods_spawned_limit:
                        rec = self._spawn()
                        stop = threading.Event()
                        fut = executor.submit(self._run_pod, rec, stop)
                        running[fut] = (rec, stop)
                        order.append(fut)
                        self._note_concurrency(len(running))
                if not running:
                    if self.terminated:
                        return "target_reached"
                    if self._spawned >= self.pool.pods_spawned_limit:
                        return "budget_exhausted"
                    time.sleep(self.poll_seconds)
                    continue
                done, _ = wait(list(running), timeout=self.poll_seconds, return_when=FIRST_COMPLETED)
                for fut in [f for f in order if f in done]:
                    rec, _ = running.pop(fut)
                    order.remove(fut)
                    error = fut.exception()
                    self._finish(rec, None if error else fut.result(), error)
                    if self.terminated:
                        for r, stop in running.values():
                            stop.set()
        finally:
            for fut in zombies:
                fut.exception()
            executor.shutdown(wait=True)
