"""Deterministic in-process network of grid nodes on a virtual clock.

Messages are encoded to bytes on send and decoded on delivery, so the
simulator exercises the same framing as TCP. Link latency comes from a seeded
RNG and every link is FIFO; with the same seed and scenario a run is
replayable event for event.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from ..ledger import Ledger, price
from ..protocol import Kind, NodeId, Role, WireMessage, decode, encode
from .base import Node, Timing
from .executor import DurationModel, Executor, linear_duration
from .journal import Journal
from .manager import Manager
from .submanager import SubManager
from .tasks import JobKind, JobState, JobStatus

log = logging.getLogger(__name__)

CLIENT = "client"
# arbitrary fixed origin for virtual timestamps (2026-01-01T00:00:00Z)
BASE_TIME = 1767225600.0


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioEvent:
    at_ms: int
    action: str
    args: tuple[str, ...] = ()


_EVENTS = {"KILL_EXECUTOR": 1, "KILL_MANAGER": 0, "PARTITION": 2, "HEAL": 0, "ADD_EXECUTOR": 0}


def parse_scenario(text: str) -> list[ScenarioEvent]:
    """Parse ``AT <virtual-ms> <EVENT> [args]`` lines; ``#`` starts a comment."""
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"AT\s+(\d+)\s+([A-Z_]+)((?:\s+\S+)*)", line)
        if not m:
            raise ScenarioError(f"line {lineno}: expected 'AT <ms> <EVENT> [args]', got {line!r}")
        action, args = m.group(2), tuple(m.group(3).split())
        if action not in _EVENTS:
            raise ScenarioError(f"line {lineno}: unknown event {action}")
        if len(args) != _EVENTS[action]:
            raise ScenarioError(f"line {lineno}: {action} takes {_EVENTS[action]} argument(s)")
        events.append(ScenarioEvent(int(m.group(1)), action, args))
    return sorted(events, key=lambda e: e.at_ms)


class Simulator:
    def __init__(self, seed: int = 0, latency_ms: tuple[int, int] = (1, 20), tick_ms: int = 100,
                 base_time: float = BASE_TIME):
        self.rng = random.Random(seed)
        self.latency_ms = latency_ms
        self.tick_ms = tick_ms
        self.base_time = base_time
        self.now_ms = 0
        self.nodes: dict[str, Node] = {}
        self.dead: set[str] = set()
        self.cuts: set[frozenset] = set()
        self.client_inbox: list[WireMessage] = []
        self.delivered = 0
        self.dropped = 0
        self.trace: list[tuple[int, str, str, str]] = []
        self._queue: list = []
        self._seq = itertools.count()
        self._link_last: dict[tuple[str, str], int] = {}
        self._hooks: list[Callable[["Simulator", str, str, WireMessage], Optional[bool]]] = []
        self._schedule(self.tick_ms, "tick", None)

    @property
    def now(self) -> float:
        return self.base_time + self.now_ms / 1000.0

    def _schedule(self, at_ms: int, kind: str, data: Any) -> None:
        at_ms = max(at_ms, self.now_ms)
        heapq.heappush(self._queue, (at_ms, next(self._seq), kind, data))

    def add(self, name: str, node: Node) -> Node:
        self.nodes[name] = node
        self.dead.discard(name)
        self._emit(name, node.start(self.now))
        return node

    def at(self, at_ms: int, fn: Callable[["Simulator"], None]) -> None:
        self._schedule(at_ms, "call", fn)

    def add_hook(self, fn) -> None:
        """Register ``fn(sim, src, dst, msg)``; returning True drops the message."""
        self._hooks.append(fn)

    def send(self, src: str, dst: str, msg: WireMessage) -> None:
        data = encode(msg)
        for hook in self._hooks:
            if hook(self, src, dst, msg):
                self.dropped += 1
                return
        lo, hi = self.latency_ms
        t = self.now_ms + self.rng.randint(lo, hi)
        t = max(t, self._link_last.get((src, dst), 0))
        self._link_last[(src, dst)] = t
        self._schedule(t, "deliver", (src, dst, data))

    def inject(self, src: str, dst: str, msg: WireMessage) -> None:
        self.send(src, dst, msg)

    def _emit(self, src: str, sends) -> None:
        for dst, msg in sends:
            self.send(src, dst, msg)

    def kill(self, name: str) -> None:
        log.info("t=%dms: kill %s", self.now_ms, name)
        self.dead.add(name)

    def partition(self, a: str, b: str) -> None:
        self.cuts.add(frozenset((a, b)))

    def heal(self) -> None:
        self.cuts.clear()

    def step(self) -> bool:
        if not self._queue:
            return False
        at_ms, _, kind, data = heapq.heappop(self._queue)
        self.now_ms = at_ms
        if kind == "tick":
            for name in sorted(self.nodes):
                if name not in self.dead:
                    self._emit(name, self.nodes[name].tick(self.now))
            self._schedule(self.now_ms + self.tick_ms, "tick", None)
        elif kind == "call":
            data(self)
        elif kind == "deliver":
            src, dst, raw = data
            if dst in self.dead or src in self.dead or frozenset((src, dst)) in self.cuts:
                self.dropped += 1
                return True
            msg, _ = decode(raw)
            self.delivered += 1
            if dst == CLIENT:
                self.client_inbox.append(msg)
            elif dst in self.nodes:
                self.trace.append((self.now_ms, src, dst, msg.kind.value))
                self._emit(dst, self.nodes[dst].receive(src, msg, self.now))
            else:
                self.dropped += 1
        return True

    def run_until(self, predicate: Callable[[], bool], limit_ms: int) -> bool:
        while self.now_ms <= limit_ms:
            if predicate():
                return True
            if not self.step():
                break
        return predicate()

    def run_for(self, ms: int) -> None:
        end = self.now_ms + ms
        while self._queue and self._queue[0][0] <= end:
            self.step()
        self.now_ms = end


@dataclass
class Grid:
    """A simulated deployment plus helpers to submit jobs and audit the outcome."""

    sim: Simulator
    managers: list[str]
    executors: list[str]
    submanagers: list[str] = field(default_factory=list)
    timing: Timing = field(default_factory=Timing)
    duration: Optional[DurationModel] = None
    rates: list[int] = field(default_factory=list)
    fired: list[tuple[int, str]] = field(default_factory=list)
    _job_counter: int = 0

    @classmethod
    def build(cls, n_executors: int, *, n_managers: int = 2, n_submanagers: int = 0,
              seed: int = 0, timing: Timing = Timing(), duration: Optional[DurationModel] = None,
              rate_minor_per_s: int = 2, latency_ms: tuple[int, int] = (1, 20)) -> "Grid":
        sim = Simulator(seed=seed, latency_ms=latency_ms)
        duration = duration or linear_duration()
        managers = [f"mgr-{i + 1}" for i in range(n_managers)]
        grid = cls(sim, managers, [], [], timing, duration)
        for i, name in enumerate(managers):
            sim.add(name, Manager(name, managers, timing=timing, standby=i > 0,
                                  journal=Journal(), ledger=Ledger(),
                                  node=NodeId.new(Role.MANAGER, sim.rng), rng=sim.rng))
        for i in range(n_submanagers):
            name = f"sub-{i + 1}"
            grid.submanagers.append(name)
            sim.add(name, SubManager(managers, timing=timing, node=NodeId.new(Role.SUBMANAGER, sim.rng),
                                     rng=sim.rng))
        for _ in range(n_executors):
            grid.add_executor(rate_minor_per_s)
        # let registrations and the first replication round settle
        sim.run_for(1000)
        return grid

    def add_executor(self, rate_minor_per_s: int = 2) -> str:
        i = len(self.executors) + 1
        name = f"exec-{i}"
        if self.submanagers:
            upstreams = [self.submanagers[(i - 1) % len(self.submanagers)]]
        else:
            upstreams = list(self.managers)
        self.executors.append(name)
        self.rates.append(rate_minor_per_s)
        self.sim.add(name, Executor(upstreams, label=name, rate_minor_per_s=rate_minor_per_s,
                                    timing=self.timing, duration=self.duration, rng=self.sim.rng))
        return name

    # -- inspection --------------------------------------------------------

    def manager(self, name: str) -> Manager:
        return self.sim.nodes[name]  # type: ignore[return-value]

    def executor(self, name: str) -> Executor:
        return self.sim.nodes[name]  # type: ignore[return-value]

    @property
    def active(self) -> Manager:
        """The live manager holding the highest epoch."""
        live = [self.manager(m) for m in self.managers if m not in self.sim.dead]
        actives = [m for m in live if m.active]
        pool = actives or live
        return max(pool, key=lambda m: m.epoch)

    def status(self, job_id: str) -> Optional[JobStatus]:
        return self.active.job_status(job_id)

    # -- jobs --------------------------------------------------------------

    def submit(self, kind: JobKind, params: dict, job_id: Optional[str] = None) -> str:
        self._job_counter += 1
        job_id = job_id or f"job-{self._job_counter}"
        client = NodeId.new(Role.CLIENT, self.sim.rng)
        msg = WireMessage(Kind.SUBMIT_JOB, client, 0,
                          {"job_id": job_id, "job_kind": kind.value, "params": params})
        self.sim.inject(CLIENT, self.active.address, msg)
        return job_id

    def submit_pi(self, digits: int, parts: int = 4, guard: int = 10) -> str:
        return self.submit(JobKind.PI, {"digits": digits, "guard": guard, "parts": parts})

    def submit_weather(self, rows: list[list[float]], parts: int = 4) -> str:
        return self.submit(JobKind.WEATHER, {"rows": rows, "parts": parts})

    def done(self, job_id: str) -> bool:
        st = self.status(job_id)
        return st is not None and st.state in (JobState.DONE, JobState.FAILED)

    def run_job(self, job_id: str, limit_ms: int = 600_000) -> JobStatus:
        self.sim.run_until(lambda: self.done(job_id), self.sim.now_ms + limit_ms)
        st = self.status(job_id)
        if st is None:
            raise TimeoutError(f"job {job_id} never reached the active manager")
        return st

    def apply_scenario(self, events: list[ScenarioEvent]) -> None:
        """Schedule events; their times count from now (normally job submission)."""
        t0 = self.sim.now_ms
        for ev in events:
            self.sim.at(t0 + ev.at_ms, lambda sim, ev=ev: self._fire(ev))

    def _fire(self, ev: ScenarioEvent) -> None:
        self.fired.append((self.sim.now_ms, " ".join((ev.action,) + ev.args)))
        if ev.action == "KILL_EXECUTOR":
            n = int(ev.args[0])
            if not 1 <= n <= len(self.executors):
                raise ScenarioError(f"no executor {n}")
            self.sim.kill(self.executors[n - 1])
        elif ev.action == "KILL_MANAGER":
            self.sim.kill(self.active.address)
        elif ev.action == "PARTITION":
            self.sim.partition(*ev.args)
        elif ev.action == "HEAL":
            self.sim.heal()
        elif ev.action == "ADD_EXECUTOR":
            self.add_executor(self.rates[-1] if self.rates else 2)

    # -- audits ------------------------------------------------------------

    def audit(self, job_id: Optional[str] = None) -> dict:
        """Journal checks used by the fault scenarios.

        ``exactly_once``: each task has exactly one accepted result in the
        journal. ``billing``: ledger work equals accepted result work and every
        cost recomputes from its rate.
        """
        m = self.active
        results = [e for e in m.journal if e.kind is Kind.TASK_RESULT]
        keys = [(e.body["job_id"], e.body["task_id"]) for e in results]
        if job_id is not None:
            keys = [k for k in keys if k[0] == job_id]
        accepted_seconds = sum(e.body["wall_seconds"] for e in results)
        return {
            "exactly_once": len(keys) == len(set(keys)),
            "results": len(keys),
            "ledger_seconds": m.ledger.total_work_seconds(),
            "accepted_seconds": accepted_seconds,
            "billing": m.ledger.total_work_seconds() == accepted_seconds and m.ledger.audit(),
            "report_total": m.ledger.report().total_minor,
            "recomputed_total": sum(price(s.work_seconds, s.rate_minor_per_s) for s in m.ledger.sessions),
        }


def simulate_pi(digits: int, executors: int, *, parts: int = 4, seed: int = 0,
                scenario: Optional[list[ScenarioEvent]] = None, n_managers: int = 2,
                n_submanagers: int = 0, limit_ms: int = 600_000) -> tuple[Grid, str, JobStatus]:
    grid = Grid.build(executors, n_managers=n_managers, n_submanagers=n_submanagers, seed=seed)
    if scenario:
        grid.apply_scenario(scenario)
    job = grid.submit_pi(digits, parts=parts)
    st = grid.run_job(job, limit_ms)
    return grid, job, st
