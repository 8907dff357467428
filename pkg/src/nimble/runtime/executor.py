"""Executor: registers upstream, runs grid threads one at a time, reports results."""
from __future__ import annotations

import logging
import math
import time
import uuid
from collections import deque
from concurrent.futures import Executor as WorkPool, Future
from dataclasses import dataclass
from typing import Callable, Optional

from ..protocol import Deduplicator, EpochGuard, Kind, NodeId, Role, ThreadMessage, WireMessage
from .base import Node, Sends, Timing
from .tasks import Reducer, TaskKind, TaskResult, TaskSpec, run_worker

log = logging.getLogger(__name__)

# Maps a task to the seconds it should appear to take; None measures real time.
DurationModel = Callable[[TaskSpec], float]


def linear_duration(base: float = 0.5, per_unit: float = 0.05) -> DurationModel:
    return lambda spec: base + per_unit * spec.work_units()


@dataclass
class Running:
    spec: TaskSpec
    started_at: float
    ready_at: float = math.inf
    payload: object = None
    messages: tuple = ()
    error: Optional[str] = None
    computed: bool = False
    future: Optional[Future] = None
    t0: float = 0.0


class Executor(Node):
    def __init__(self, upstreams: list[str], *, label: str = "", rate_minor_per_s: int = 0,
                 node: Optional[NodeId] = None, timing: Timing = Timing(),
                 duration: Optional[DurationModel] = None, rng=None,
                 pool: Optional[WorkPool] = None):
        super().__init__()
        if not upstreams:
            raise ValueError("executor needs at least one upstream address")
        self.upstreams = list(upstreams)
        self.upstream = self.upstreams[0]
        self.label = label
        self.rate = rate_minor_per_s
        self.node = node or NodeId.nil(Role.EXECUTOR)
        self.timing = timing
        self.duration = duration
        self.rng = rng
        self.pool = pool  # off-loop computation for real deployments
        self.guard = EpochGuard()
        self.registered = False
        self._nonce: Optional[str] = None
        self._last_register = -math.inf
        self._last_heard = 0.0
        self._next_beat = 0.0

        self.queue: deque[TaskSpec] = deque()
        self.current: Optional[Running] = None
        self.reducers: dict[tuple[str, int], Reducer] = {}
        self.parked: dict[tuple[str, int], list[ThreadMessage]] = {}
        self.dedup = Deduplicator()
        self.outbox: dict[tuple[str, int], list[tuple[Kind, dict]]] = {}
        self.completed: list[TaskResult] = []
        self.rejected_stale = 0

    @property
    def epoch(self) -> int:
        return self.guard.epoch

    def holding(self) -> list[list]:
        keys = [t.key for t in self.queue] + list(self.outbox)
        if self.current is not None:
            keys.append(self.current.spec.key)
        return [list(k) for k in dict.fromkeys(keys)]

    # -- registration ------------------------------------------------------

    def start(self, now: float) -> Sends:
        self._last_heard = now
        self._register(now)
        return self._drain()

    def _register(self, now: float) -> None:
        self._nonce = self._new_nonce()
        self._last_register = now
        self._send(self.upstream, self._msg(
            Kind.REGISTER, nonce=self._nonce, label=self.label, rate_minor_per_s=self.rate,
            holding=self.holding(), route=None, registered_at=None))

    def _new_nonce(self) -> str:
        if self.rng is not None:
            return f"{self.rng.getrandbits(64):016x}"
        return uuid.uuid4().hex[:16]

    def _rotate(self, now: float) -> None:
        i = self.upstreams.index(self.upstream) if self.upstream in self.upstreams else -1
        self.upstream = self.upstreams[(i + 1) % len(self.upstreams)]
        self.registered = False
        self._last_heard = now
        log.info("executor %s switching upstream to %s", self.node.short(), self.upstream)
        self._register(now)

    def _flush_outbox(self) -> None:
        for msgs in self.outbox.values():
            for kind, body in msgs:
                self._send(self.upstream, self._msg(kind, **body))

    # -- inbound -----------------------------------------------------------

    def receive(self, peer: str, msg: WireMessage, now: float) -> Sends:
        if msg.sender.role not in (Role.MANAGER, Role.SUBMANAGER):
            return self._drain()
        if msg.kind is Kind.EPOCH_ANNOUNCE:
            if self.guard.announce(msg.epoch):
                log.info("executor %s: new epoch %d from %s", self.node.short(), msg.epoch, peer)
                self.upstream = peer
                self.registered = False
                self._last_heard = now
                self._register(now)
            return self._drain()
        if msg.kind is Kind.REGISTER_ACK:
            self._on_register_ack(peer, msg, now)
            return self._drain()
        if not self.guard.admits(msg):
            self.rejected_stale += 1
            log.info("executor %s: dropping %s from stale epoch %d < %d",
                     self.node.short(), msg.kind.value, msg.epoch, self.epoch)
            return self._drain()
        if peer == self.upstream:
            self._last_heard = now
        if msg.epoch > self.epoch:
            # a newer manager is speaking without having announced itself to us
            self.guard.epoch = msg.epoch
            self.upstream = peer
            self.registered = False
            self._register(now)
        if msg.kind is Kind.TASK_ASSIGN:
            self._on_assign(msg, now)
        elif msg.kind is Kind.THREAD_MESSAGE:
            self._on_thread_message(ThreadMessage.from_body(msg.body))
        elif msg.kind is Kind.RESULT_ACK:
            if msg.body["executor"]["id"] == str(self.node.id):
                self.outbox.pop((msg.body["job_id"], msg.body["task_id"]), None)
        elif msg.kind is Kind.SHUTDOWN:
            self.stopped = True
        self._advance(now)
        return self._drain()

    def _on_register_ack(self, peer: str, msg: WireMessage, now: float) -> None:
        b = msg.body
        if b["nonce"] != self._nonce:
            return
        if not b["accepted"]:
            log.warning("executor %s: registration refused by %s (%s)",
                        self.node.short(), peer, b["reason"])
            if b["reason"] == "standby" and len(self.upstreams) > 1:
                self._rotate(now)
            return
        self.node = NodeId.from_json(b["node"])
        if msg.epoch > self.guard.epoch:
            self.guard.epoch = msg.epoch
        self.upstream = peer
        self.registered = True
        self._last_heard = now
        self._flush_outbox()

    def _on_assign(self, msg: WireMessage, now: float) -> None:
        if msg.body["executor"]["id"] != str(self.node.id):
            return
        spec = TaskSpec.from_json(msg.body["task"])
        if spec.key in self.outbox or any(t.key == spec.key for t in self.queue):
            return
        if self.current is not None and self.current.spec.key == spec.key:
            return
        if spec.kind is TaskKind.REDUCE:
            red = self.reducers.setdefault((spec.job_id, spec.thread), Reducer(spec))
            for tm in self.parked.pop((spec.job_id, spec.thread), []):
                red.offer(tm)
        self.queue.append(spec)

    def _on_thread_message(self, tm: ThreadMessage) -> None:
        if not self.dedup.accept(tm):
            return
        red = self.reducers.get((tm.job_id, tm.to_thread))
        if red is None:
            self.parked.setdefault((tm.job_id, tm.to_thread), []).append(tm)
        else:
            red.offer(tm)

    # -- work --------------------------------------------------------------

    def _advance(self, now: float) -> None:
        while True:
            if self.current is None:
                if not self.queue:
                    return
                self.current = Running(self.queue.popleft(), started_at=now)
            cur = self.current
            if not cur.computed:
                if not self._compute(cur, now):
                    return
            if now < cur.ready_at:
                return
            self._finish(cur, now)
            self.current = None

    def _compute(self, cur: Running, now: float) -> bool:
        spec = cur.spec
        if spec.kind is TaskKind.REDUCE:
            red = self.reducers.get((spec.job_id, spec.thread))
            if red is None or not red.complete:
                return False
            cur.t0 = time.perf_counter()
            self._collect(cur, red.result)
        elif self.pool is not None:
            if cur.future is None:
                cur.t0 = time.perf_counter()
                cur.future = self.pool.submit(run_worker, spec)
                return False
            if not cur.future.done():
                return False
            self._collect(cur, cur.future.result)
        else:
            cur.t0 = time.perf_counter()
            self._collect(cur, lambda: run_worker(spec))
        elapsed = time.perf_counter() - cur.t0
        cur.computed = True
        cur.ready_at = now + (self.duration(spec) if self.duration else elapsed)
        return True

    def _collect(self, cur: Running, fn: Callable) -> None:
        spec = cur.spec
        try:
            out = fn()
            if spec.kind is TaskKind.REDUCE:
                cur.payload = out
            else:
                cur.payload, msgs = out
                cur.messages = tuple(msgs)
        except Exception as exc:  # reported to the manager, which fails the job
            log.exception("task %s/%d failed", spec.job_id, spec.task_id)
            cur.error = f"{type(exc).__name__}: {exc}"

    def _finish(self, cur: Running, now: float) -> None:
        spec = cur.spec
        wall = max(0, int(cur.ready_at - cur.started_at))
        result = TaskResult(spec.job_id, spec.task_id, self.node, cur.payload, wall, cur.error)
        sends: list[tuple[Kind, dict]] = [(Kind.THREAD_MESSAGE, m.to_body()) for m in cur.messages]
        sends.append((Kind.TASK_RESULT, result.to_body()))
        self.outbox[spec.key] = sends
        self.completed.append(result)
        if spec.kind is TaskKind.REDUCE:
            self.reducers.pop((spec.job_id, spec.thread), None)
        if self.registered:
            for kind, body in sends:
                self._send(self.upstream, self._msg(kind, **body))

    def tick(self, now: float) -> Sends:
        if self.stopped:
            return self._drain()
        if now - self._last_heard > self.timing.dead_after:
            if len(self.upstreams) > 1 or self.registered:
                self._rotate(now)
            elif now - self._last_register >= self.timing.heartbeat:
                self._register(now)
        elif not self.registered and now - self._last_register >= self.timing.heartbeat:
            self._register(now)
        if self.registered and now >= self._next_beat:
            self._next_beat = now + self.timing.heartbeat
            self._send(self.upstream, self._msg(Kind.HEARTBEAT, journal_len=0, address=""))
        self._advance(now)
        return self._drain()
