"""The manager: scheduling, result collection, thread-message routing, failover.

Every durable state change goes through :meth:`Manager._append`, which writes
a journal entry, applies it, and replicates it to the other managers. The
standby managers apply the same entries, so whichever manager takes over
continues from an identical job state.
"""
from __future__ import annotations

import datetime as dt
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .. import weather
from ..ledger import Ledger
from ..protocol import Kind, NodeId, Role, ThreadMessage, WireMessage
from .base import Node, Sends, Timing
from .journal import Journal
from .tasks import (JobKind, JobState, JobStatus, ManagerEpoch, TaskKind, TaskResult, TaskSpec,
                    plan_job)

log = logging.getLogger(__name__)

JOURNAL_BATCH = 256


@dataclass
class ExecutorInfo:
    node: NodeId
    label: str
    rate: int
    route: str
    order: int
    connections: int = 0
    last_heard: float = 0.0
    live: bool = True
    route_closed: bool = False

    @property
    def key(self) -> str:
        return str(self.node.id)


@dataclass
class Job:
    job_id: str
    kind: JobKind
    params: dict
    tasks: dict[int, TaskSpec]
    state: JobState = JobState.PENDING
    results: dict[int, TaskResult] = field(default_factory=dict)
    result: Any = None
    error: Optional[str] = None
    thread_msgs: dict[int, dict[tuple, ThreadMessage]] = field(default_factory=dict)

    @property
    def reduce_task(self) -> Optional[TaskSpec]:
        return next((t for t in self.tasks.values() if t.kind is TaskKind.REDUCE), None)

    @property
    def workers(self) -> list[TaskSpec]:
        return [t for t in self.tasks.values() if t.kind is not TaskKind.REDUCE]

    @property
    def terminal(self) -> bool:
        return self.state in (JobState.DONE, JobState.FAILED)

    def runnable(self) -> list[TaskSpec]:
        """Tasks that should currently be held by some executor."""
        if self.terminal:
            return []
        if self.state is JobState.REDUCING:
            red = self.reduce_task
            return [red] if red and red.task_id not in self.results else []
        return [t for t in self.workers if t.task_id not in self.results]

    def status(self) -> JobStatus:
        return JobStatus(self.job_id, self.state, len(self.tasks), len(self.results), self.result)


@dataclass
class Assignment:
    executor: str
    assigned_at: float
    deadline: float


@dataclass
class Pending:
    key: tuple[str, int]
    avoid: Optional[str] = None


@dataclass
class PeerManager:
    address: str
    last_heard: float = 0.0
    journal_len: int = 0


class Manager(Node):
    def __init__(self, address: str, group: list[str], *, node: Optional[NodeId] = None,
                 journal: Optional[Journal] = None, ledger: Optional[Ledger] = None,
                 timing: Timing = Timing(), standby: bool = False,
                 results_dir: Optional[Path] = None, rng: Optional[random.Random] = None,
                 stable_routes: bool = True):
        super().__init__()
        if address not in group:
            group = [address] + list(group)
        self.address = address
        self.group = list(group)
        self.rng = rng
        self.node = node or NodeId.new(Role.MANAGER, rng)
        self.journal = journal if journal is not None else Journal()
        self.ledger = ledger if ledger is not None else Ledger()
        self.timing = timing
        self.results_dir = Path(results_dir) if results_dir else None
        self.want_active = not standby
        # Simulator routes are node names any manager can use; TCP routes are
        # per-process connections, so a new active manager must wait for
        # executors to re-register before it can reach them.
        self.stable_routes = stable_routes

        self.epoch = 0
        self.active = False
        self.active_address: Optional[str] = None
        self.standbys: list[str] = [a for a in self.group if a != address]

        self.peers = {a: PeerManager(a) for a in self.group if a != address}
        self._addr_of: dict[str, str] = {}
        self._next_beat = 0.0
        self._rr = 0
        self._deferred: list[tuple[int, str, WireMessage]] = []
        self.accepted_results: list[TaskResult] = []
        self._reset_state()
        for entry in self.journal:
            self._apply(entry)

    def _reset_state(self) -> None:
        self.registry: dict[str, ExecutorInfo] = {}
        self.jobs: dict[str, Job] = {}
        self.assignments: dict[tuple[str, int], Assignment] = {}
        self.history: dict[tuple[str, int, str], float] = {}
        self.pending: list[Pending] = []

    # -- journal -----------------------------------------------------------

    def _append(self, entry: WireMessage) -> int:
        seq = self.journal.append(entry)
        self._apply(entry)
        for addr in self.peers:
            self._send(addr, self._msg(Kind.JOURNAL_APPEND, seq=seq, entry=entry.to_json()))
        return seq

    def _apply(self, entry: WireMessage) -> None:
        b = entry.body
        if entry.kind is Kind.EPOCH_ANNOUNCE:
            self.epoch = max(self.epoch, entry.epoch)
            self.active_address = b["active"]
            self.standbys = list(b["standbys"])
        elif entry.kind is Kind.REGISTER:
            key = str(entry.sender.id)
            info = self.registry.get(key)
            if info is None:
                info = ExecutorInfo(entry.sender, b["label"], b["rate_minor_per_s"], b["route"],
                                    order=len(self.registry))
                self.registry[key] = info
            info.label, info.rate, info.route = b["label"], b["rate_minor_per_s"], b["route"]
            info.connections += 1
            info.live, info.route_closed = True, False
            info.last_heard = max(info.last_heard, b["registered_at"])
            self.ledger.register_node(key, b["label"], b["rate_minor_per_s"], b["registered_at"])
        elif entry.kind is Kind.SUBMIT_JOB:
            kind = JobKind(b["job_kind"])
            tasks = {t.task_id: t for t in plan_job(b["job_id"], kind, b["params"])}
            job = Job(b["job_id"], kind, b["params"], tasks)
            self.jobs[job.job_id] = job
            self.pending.extend(Pending(t.key) for t in job.runnable())
        elif entry.kind is Kind.TASK_ASSIGN:
            spec = TaskSpec.from_json(b["task"])
            ex = str(NodeId.from_json(b["executor"]).id)
            self.assignments[spec.key] = Assignment(ex, b["assigned_at"],
                                                    b["assigned_at"] + self.timing.task_timeout)
            self.history.setdefault((*spec.key, ex), b["assigned_at"])
            self.pending = [p for p in self.pending if p.key != spec.key]
            job = self.jobs[spec.job_id]
            if job.state is JobState.PENDING:
                job.state = JobState.RUNNING
        elif entry.kind is Kind.THREAD_MESSAGE:
            tm = ThreadMessage.from_body(b)
            job = self.jobs[tm.job_id]
            job.thread_msgs.setdefault(tm.to_thread, {})[tm.key] = tm
        elif entry.kind is Kind.TASK_RESULT:
            self._apply_result(TaskResult.from_body(b))
        elif entry.kind is Kind.SESSION_REPORT:
            self.ledger.record_session(b["node"], b["start"], b["stop"], b["work_seconds"],
                                       key=b["key"])
        else:
            log.warning("ignoring journal entry of kind %s", entry.kind.value)

    def _apply_result(self, r: TaskResult) -> None:
        job = self.jobs[r.job_id]
        job.results[r.task_id] = r
        self.accepted_results.append(r)
        self.assignments.pop(r.key, None)
        self.pending = [p for p in self.pending if p.key != r.key]
        if r.error is not None:
            job.state, job.error = JobState.FAILED, r.error
            return
        spec = job.tasks[r.task_id]
        if job.kind is JobKind.PI:
            if spec.kind is TaskKind.REDUCE:
                job.state, job.result = JobState.DONE, r.payload["pi"]
            elif all(t.task_id in job.results for t in job.workers):
                job.state = JobState.REDUCING
                self.pending.append(Pending(job.reduce_task.key))
        elif len(job.results) == len(job.tasks):
            rows: list = []
            for tid in sorted(job.results):
                rows.extend(job.results[tid].payload["rows"])
            job.state, job.result = JobState.DONE, rows
        if job.state is JobState.DONE and self.active:
            self._store_result(job)

    def _store_result(self, job: Job) -> None:
        if self.results_dir is None:
            return
        self.results_dir.mkdir(parents=True, exist_ok=True)
        if job.kind is JobKind.PI:
            text = job.result + "\n"
        else:
            text = weather.format_batch(job.result)
        (self.results_dir / f"{job.job_id}.txt").write_text(text)

    # -- lifecycle ---------------------------------------------------------

    def start(self, now: float) -> Sends:
        for p in self.peers.values():
            p.last_heard = now
        if self.epoch == 0 and self.want_active:
            self._become_active(now, 1)
        elif self.active_address == self.address:
            self.active = True
            self._rebuild_soft(now)
        return self._drain()

    def _become_active(self, now: float, epoch: int) -> None:
        prev = self.active_address
        others = [a for a in self.standbys if a != self.address]
        if prev is not None and prev != self.address:
            others = [a for a in others if a != prev] + [prev]
        for a in self.group:
            if a != self.address and a not in others:
                others.append(a)
        self.active = True
        self.epoch = epoch
        self._append(WireMessage(Kind.EPOCH_ANNOUNCE, self.node, epoch,
                                 {"active": self.address, "standbys": others}))
        log.info("%s active at epoch %d", self.address, epoch)
        self._rebuild_soft(now)
        self._broadcast_epoch()
        self._dispatch(now)

    def _broadcast_epoch(self) -> None:
        announce = self._msg(Kind.EPOCH_ANNOUNCE, active=self.address, standbys=self.standbys)
        if self.stable_routes:
            for route in sorted({e.route for e in self.registry.values()}):
                self._send(route, announce)
        for addr in self.peers:
            self._send(addr, announce)

    def _rebuild_soft(self, now: float) -> None:
        for e in self.registry.values():
            e.live, e.last_heard = self.stable_routes, now
        self.pending = []
        for job in self.jobs.values():
            for t in job.runnable():
                a = self.assignments.get(t.key)
                if a is None:
                    self.pending.append(Pending(t.key))
                else:
                    a.deadline = now + self.timing.task_timeout
        self._next_beat = now

    def _demote(self, epoch: int) -> None:
        log.warning("%s: epoch %d superseded by %d; stepping down", self.address, self.epoch, epoch)
        self.active = False
        self.want_active = False
        self.journal.reset()
        self.ledger.reset()
        self._reset_state()
        self._deferred.clear()
        self.accepted_results = []
        self.epoch = epoch

    # -- message handling --------------------------------------------------

    def receive(self, peer: str, msg: WireMessage, now: float) -> Sends:
        if msg.sender.role is Role.MANAGER:
            self._on_manager(peer, msg, now)
        elif msg.kind in (Kind.SUBMIT_JOB, Kind.REPORT_QUERY):
            if self.active:
                self._on_client(peer, msg, now)
            else:
                log.info("%s: standby ignores %s from %s", self.address, msg.kind.value, peer)
        elif msg.kind is Kind.SHUTDOWN and msg.sender.role is Role.CLIENT:
            self._shutdown(msg.body["reason"])
        elif msg.kind is Kind.REGISTER:
            self._on_register(peer, msg, now)
        elif not self.active:
            pass
        elif msg.epoch < self.epoch:
            # stale sender; tell it who is in charge now
            self._send(peer, self._msg(Kind.EPOCH_ANNOUNCE, active=self.address,
                                       standbys=self.standbys))
        elif msg.epoch > self.epoch:
            self._demote(msg.epoch)
        else:
            self._touch(msg.sender, now, peer)
            if msg.kind is Kind.TASK_RESULT:
                self._on_result(peer, msg, now)
            elif msg.kind is Kind.THREAD_MESSAGE:
                self._on_thread_message(msg, now)
            elif msg.kind is Kind.HEARTBEAT:
                pass
            else:
                log.warning("%s: unexpected %s from %s", self.address, msg.kind.value, peer)
        return self._drain()

    def _shutdown(self, reason: str) -> None:
        log.info("%s: shutting down (%s)", self.address, reason)
        bye = self._msg(Kind.SHUTDOWN, reason=reason)
        if self.active:
            for route in sorted({e.route for e in self.registry.values() if e.live}):
                self._send(route, bye)
        self.stopped = True

    def _touch(self, sender: NodeId, now: float, peer: str) -> None:
        e = self.registry.get(str(sender.id))
        if e is None:
            return
        e.last_heard = now
        if not self.stable_routes and e.route != peer:
            e.route, e.route_closed = peer, False
        if not e.live:
            log.info("executor %s is back", sender.short())
            e.live = True

    def _on_register(self, peer: str, msg: WireMessage, now: float) -> None:
        b = msg.body
        if not self.active:
            self._send(peer, self._msg(Kind.REGISTER_ACK, nonce=b["nonce"], node=msg.sender.to_json(),
                                       accepted=False, reason="standby"))
            return
        node = msg.sender
        if node.is_nil:
            node = NodeId.new(node.role, self.rng)
        else:
            known = self.registry.get(str(node.id))
            if (known is not None and known.live and not known.route_closed
                    and known.route != peer and now - known.last_heard <= self.timing.dead_after):
                self._send(peer, self._msg(Kind.REGISTER_ACK, nonce=b["nonce"], node=node.to_json(),
                                           accepted=False, reason="duplicate identity"))
                return
        entry = WireMessage(Kind.REGISTER, node, self.epoch,
                            {**b, "route": peer, "registered_at": now})
        self._append(entry)
        info = self.registry[str(node.id)]
        info.last_heard = now
        self._send(peer, self._msg(Kind.REGISTER_ACK, nonce=b["nonce"], node=node.to_json(),
                                   accepted=True, reason=None))
        self._revalidate(info, {tuple(h) for h in b["holding"]}, now)
        self._dispatch(now)

    def _revalidate(self, info: ExecutorInfo, holding: set, now: float) -> None:
        for key, a in list(self.assignments.items()):
            if a.executor != info.key:
                continue
            job = self.jobs[key[0]]
            if key[1] in job.results:
                continue
            if key in holding:
                a.deadline = now + self.timing.task_timeout
                spec = job.tasks[key[1]]
                if spec.kind is TaskKind.REDUCE:
                    self._redeliver(job, spec.thread, info)
            elif not any(p.key == key for p in self.pending):
                self.pending.append(Pending(key))

    def _on_result(self, peer: str, msg: WireMessage, now: float) -> None:
        r = TaskResult.from_body(msg.body)
        job = self.jobs.get(r.job_id)
        if job is None or r.task_id not in job.tasks:
            log.error("result for unknown task %s/%s from %s", r.job_id, r.task_id, peer)
            return
        ack = self._msg(Kind.RESULT_ACK, executor=r.executor.to_json(), job_id=r.job_id,
                        task_id=r.task_id)
        if r.task_id in job.results:
            self._send(peer, ack)
            return
        ex = str(r.executor.id)
        if ex not in self.registry:
            log.error("result from unregistered executor %s", r.executor.short())
            return
        started = self.history.get((r.job_id, r.task_id, ex), now - r.wall_seconds)
        seq = self._append(WireMessage(Kind.TASK_RESULT, self.node, self.epoch, msg.body))
        seq = self._append(self._msg(
            Kind.SESSION_REPORT, key=f"{r.job_id}/{r.task_id}", node=ex,
            start=min(started, now - r.wall_seconds), stop=now, work_seconds=r.wall_seconds))
        self._deferred.append((seq, peer, ack))
        self._release_acks(now)
        self._dispatch(now)

    def _on_thread_message(self, msg: WireMessage, now: float) -> None:
        tm = ThreadMessage.from_body(msg.body)
        job = self.jobs.get(tm.job_id)
        if job is None or job.terminal:
            log.info("dead letter %s -> thread %d of %s job", tm.key, tm.to_thread,
                     "finished" if job else "unknown")
            return
        if tm.key not in job.thread_msgs.get(tm.to_thread, {}):
            self._append(WireMessage(Kind.THREAD_MESSAGE, self.node, self.epoch, msg.body))
        a = self.assignments.get((tm.job_id, tm.to_thread))
        if a is not None:
            info = self.registry[a.executor]
            if info.live:
                self._send(info.route, self._msg(Kind.THREAD_MESSAGE, **tm.to_body()))
        # otherwise the message waits in the journal until the thread is placed

    def _redeliver(self, job: Job, thread: int, info: ExecutorInfo) -> None:
        for tm in job.thread_msgs.get(thread, {}).values():
            self._send(info.route, self._msg(Kind.THREAD_MESSAGE, **tm.to_body()))

    def _on_client(self, peer: str, msg: WireMessage, now: float) -> None:
        b = msg.body
        if msg.kind is Kind.REPORT_QUERY:
            as_of = dt.date.fromisoformat(b["as_of"]) if b["as_of"] else None
            rep = self.ledger.report(as_of)
            self._send(peer, self._msg(Kind.REPORT, text=rep.render(), total_minor=rep.total_minor,
                                       rows=rep.to_json()))
            return
        job = self.jobs.get(b["job_id"])
        if job is None:
            try:
                JobKind(b["job_kind"])
                plan_job(b["job_id"], JobKind(b["job_kind"]), b["params"])
            except (KeyError, ValueError, TypeError) as exc:
                log.error("rejecting job %s: %s", b["job_id"], exc)
                self._send(peer, self._msg(Kind.JOB_STATUS, job_id=b["job_id"], state=JobState.FAILED.value,
                                           tasks_total=0, tasks_done=0, result=None,
                                           executors_live=self.live_count()))
                return
            self._append(WireMessage(Kind.SUBMIT_JOB, self.node, self.epoch, b))
            self._dispatch(now)
            job = self.jobs[b["job_id"]]
        st = job.status()
        self._send(peer, self._msg(Kind.JOB_STATUS, job_id=st.job_id, state=st.state.value,
                                   tasks_total=st.tasks_total, tasks_done=st.tasks_done,
                                   result=st.result, executors_live=self.live_count()))

    def _on_manager(self, peer: str, msg: WireMessage, now: float) -> None:
        sid = str(msg.sender.id)
        if msg.kind is Kind.HEARTBEAT and msg.body["address"]:
            self._addr_of[sid] = msg.body["address"]
        addr = self._addr_of.get(sid, peer if peer in self.peers else None)
        if addr is None and msg.kind is Kind.EPOCH_ANNOUNCE:
            addr = msg.body["active"]
            self._addr_of[sid] = addr
        pm = self.peers.get(addr) if addr else None
        if pm is not None:
            pm.last_heard = now

        if msg.epoch < self.epoch:
            if self.active and addr is not None:
                self._send(addr, self._msg(Kind.EPOCH_ANNOUNCE, active=self.address,
                                           standbys=self.standbys))
            return
        if msg.epoch > self.epoch:
            if self.active:
                self._demote(msg.epoch)
            else:
                self.epoch = msg.epoch

        if msg.kind is Kind.EPOCH_ANNOUNCE:
            if not self.active:
                self.active_address = msg.body["active"]
                self.standbys = list(msg.body["standbys"])
        elif msg.kind is Kind.JOURNAL_APPEND:
            if self.active:
                return
            seq = msg.body["seq"]
            if seq == len(self.journal):
                entry = WireMessage.from_json(msg.body["entry"])
                self.journal.append(entry)
                self._apply(entry)
            if addr is not None:
                self._send(addr, self._heartbeat())
        elif msg.kind is Kind.HEARTBEAT:
            if pm is not None:
                pm.journal_len = msg.body["journal_len"]
            if self.active and pm is not None:
                self._catch_up(pm)
                self._release_acks(now)
            elif not self.active and addr is not None and msg.body["journal_len"] > len(self.journal):
                self._send(addr, self._heartbeat())

    def _catch_up(self, pm: PeerManager) -> None:
        if pm.journal_len >= len(self.journal):
            return
        for i, entry in enumerate(self.journal.since(pm.journal_len, JOURNAL_BATCH), pm.journal_len):
            self._send(pm.address, self._msg(Kind.JOURNAL_APPEND, seq=i, entry=entry.to_json()))

    def _heartbeat(self) -> WireMessage:
        return self._msg(Kind.HEARTBEAT, journal_len=len(self.journal), address=self.address)

    def _release_acks(self, now: float) -> None:
        """Send result acks once every reachable standby holds the journal entry."""
        if not self._deferred:
            return
        reachable = [p for p in self.peers.values()
                     if now - p.last_heard <= self.timing.dead_after]
        low = min((p.journal_len for p in reachable), default=math.inf)
        keep = []
        for seq, peer, ack in self._deferred:
            if seq < low:
                self._send(peer, ack)
            else:
                keep.append((seq, peer, ack))
        self._deferred = keep

    # -- scheduling --------------------------------------------------------

    def live_executors(self) -> list[ExecutorInfo]:
        return sorted((e for e in self.registry.values() if e.live and e.node.role is Role.EXECUTOR),
                      key=lambda e: e.order)

    def live_count(self) -> int:
        return len(self.live_executors())

    def _dispatch(self, now: float) -> None:
        if not self.active:
            return
        live = self.live_executors()
        if not live:
            return
        for item in list(self.pending):
            job = self.jobs[item.key[0]]
            spec = job.tasks[item.key[1]]
            if spec.task_id in job.results or spec not in job.runnable():
                self.pending.remove(item)
                continue
            choices = [e for e in live if e.key != item.avoid] or live
            target = choices[self._rr % len(choices)]
            self._rr += 1
            assign = self._msg(Kind.TASK_ASSIGN, executor=target.node.to_json(), task=spec.to_json(),
                               assigned_at=now)
            self._append(assign)
            self._send(target.route, assign)
            if spec.kind is TaskKind.REDUCE:
                self._redeliver(job, spec.thread, target)

    def tick(self, now: float) -> Sends:
        if self.active:
            self._check_executors(now)
            self._check_deadlines(now)
            self._release_acks(now)
            self._dispatch(now)
        else:
            self._maybe_take_over(now)
        if now >= self._next_beat:
            self._next_beat = now + self.timing.heartbeat
            beat = self._heartbeat()
            for addr in self.peers:
                self._send(addr, beat)
            if self.active:
                for route in sorted({e.route for e in self.registry.values() if e.live}):
                    self._send(route, beat)
        return self._drain()

    def _check_executors(self, now: float) -> None:
        for e in self.registry.values():
            if e.live and now - e.last_heard > self.timing.dead_after:
                e.live = False
                log.warning("executor %s (%s) missed %d heartbeats; requeueing its tasks",
                            e.node.short(), e.label, self.timing.missed_beats)
                for key, a in self.assignments.items():
                    if a.executor == e.key and not any(p.key == key for p in self.pending):
                        self.pending.append(Pending(key, avoid=e.key))

    def _check_deadlines(self, now: float) -> None:
        live = self.live_executors()
        for key, a in self.assignments.items():
            if now <= a.deadline or any(p.key == key for p in self.pending):
                continue
            if any(e.key != a.executor for e in live):
                log.warning("task %s/%d timed out on %s; reassigning", key[0], key[1], a.executor[:8])
                self.pending.append(Pending(key, avoid=a.executor))
                a.deadline = math.inf
            else:
                a.deadline = now + self.timing.task_timeout

    def _maybe_take_over(self, now: float) -> None:
        if self.active_address is None or self.active_address == self.address:
            return
        act = self.peers.get(self.active_address)
        if act is None or now - act.last_heard <= self.timing.dead_after:
            return
        order = [a for a in self.standbys if a != self.active_address]
        alive = [a for a in order
                 if a == self.address or now - self.peers[a].last_heard <= self.timing.dead_after]
        if alive and alive[0] == self.address:
            log.warning("%s: active manager %s silent for %.1fs; taking over",
                        self.address, self.active_address, now - act.last_heard)
            self._become_active(now, self.epoch + 1)

    def disconnected(self, peer: str, now: float) -> Sends:
        for e in self.registry.values():
            if e.route == peer:
                e.route_closed = True
        return self._drain()

    # -- inspection --------------------------------------------------------

    def manager_epoch(self) -> ManagerEpoch:
        return ManagerEpoch(self.epoch, self.active_address or "", tuple(self.standbys))

    def job_status(self, job_id: str) -> Optional[JobStatus]:
        job = self.jobs.get(job_id)
        return job.status() if job else None
