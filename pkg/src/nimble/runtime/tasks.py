"""Jobs, tasks and the work each grid thread performs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Sequence

from .. import weather
from ..precision import (
    DEFAULT_GUARD,
    FixedPoint,
    TermRange,
    arctan_reciprocal,
    combine_machin,
    machin_partitions,
)
from ..protocol import NodeId, ThreadMessage


class TaskKind(str, Enum):
    PI_TERM_RANGE = "PiTermRange"
    WEATHER_BATCH = "WeatherBatch"
    REDUCE = "Reduce"


class JobState(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    REDUCING = "Reducing"
    DONE = "Done"
    FAILED = "Failed"


class JobKind(str, Enum):
    PI = "pi"
    WEATHER = "weather"


@dataclass(frozen=True)
class TaskSpec:
    job_id: str
    task_id: int
    kind: TaskKind
    payload: dict
    reducer_thread: Optional[int] = None

    @property
    def thread(self) -> int:
        # one grid thread per task; the thread id is the task id
        return self.task_id

    @property
    def key(self) -> tuple[str, int]:
        return (self.job_id, self.task_id)

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "task_id": self.task_id,
            "kind": self.kind.value,
            "payload": self.payload,
            "reducer_thread": self.reducer_thread,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        return cls(obj["job_id"], obj["task_id"], TaskKind(obj["kind"]), obj["payload"],
                   obj["reducer_thread"])

    def work_units(self) -> int:
        if self.kind is TaskKind.PI_TERM_RANGE:
            return self.payload["end"] - self.payload["start"]
        if self.kind is TaskKind.WEATHER_BATCH:
            return len(self.payload["rows"])
        return self.payload["expected"]


@dataclass(frozen=True)
class TaskResult:
    job_id: str
    task_id: int
    executor: NodeId
    payload: Any
    wall_seconds: int
    error: Optional[str] = None

    def __post_init__(self):
        if self.wall_seconds < 0:
            raise ValueError("wall_seconds must be non-negative")

    @property
    def key(self) -> tuple[str, int]:
        return (self.job_id, self.task_id)

    def to_body(self) -> dict:
        return {
            "job_id": self.job_id,
            "task_id": self.task_id,
            "executor": self.executor.to_json(),
            "payload": self.payload,
            "wall_seconds": self.wall_seconds,
            "error": self.error,
        }

    @classmethod
    def from_body(cls, body: dict) -> "TaskResult":
        return cls(body["job_id"], body["task_id"], NodeId.from_json(body["executor"]),
                   body["payload"], body["wall_seconds"], body["error"])


@dataclass(frozen=True)
class ManagerEpoch:
    epoch: int
    active_manager: str
    standbys: tuple[str, ...] = ()


def failover(current: ManagerEpoch) -> ManagerEpoch:
    """Promote the first standby; the failed manager rejoins at the back."""
    if not current.standbys:
        raise LookupError("no standby manager configured")
    return ManagerEpoch(
        current.epoch + 1,
        current.standbys[0],
        tuple(current.standbys[1:]) + (current.active_manager,),
    )


@dataclass
class JobStatus:
    job_id: str
    state: JobState
    tasks_total: int
    tasks_done: int
    result: Any = None

    def __post_init__(self):
        assert self.tasks_done <= self.tasks_total
        assert self.state is not JobState.DONE or self.result is not None


def plan_pi_job(job_id: str, digits: int, guard: int = DEFAULT_GUARD, parts: int = 4) -> list[TaskSpec]:
    """Worker tasks for each term range, then one reducer expecting every partial."""
    if digits < 1:
        raise ValueError("digits must be >= 1")
    ranges = machin_partitions(digits, guard, parts)
    reducer = len(ranges)
    tasks = [
        TaskSpec(job_id, i, TaskKind.PI_TERM_RANGE,
                 {"x": r.x, "start": r.start, "end": r.end, "digits": digits + guard},
                 reducer_thread=reducer)
        for i, r in enumerate(ranges)
    ]
    tasks.append(TaskSpec(job_id, reducer, TaskKind.REDUCE,
                          {"expected": len(ranges), "digits": digits, "guard": guard}))
    return tasks


def plan_weather_job(job_id: str, rows: Sequence[Sequence[float]], parts: int = 4,
                     cp: float = 1004.0, R: float = 287.0) -> list[TaskSpec]:
    n = len(rows)
    parts = max(1, min(parts, n)) if n else 1
    bounds = [n * i // parts for i in range(parts + 1)]
    return [
        TaskSpec(job_id, i, TaskKind.WEATHER_BATCH,
                 {"first": a, "rows": [list(r) for r in rows[a:b]], "cp": cp, "R": R})
        for i, (a, b) in enumerate(zip(bounds, bounds[1:]))
    ]


def plan_job(job_id: str, kind: JobKind, params: dict) -> list[TaskSpec]:
    if kind is JobKind.PI:
        return plan_pi_job(job_id, params["digits"], params.get("guard", DEFAULT_GUARD),
                           params.get("parts", 4))
    return plan_weather_job(job_id, params["rows"], params.get("parts", 4),
                            params.get("cp", 1004.0), params.get("R", 287.0))


def schedule(tasks: Sequence[TaskSpec], executors: Sequence[Any], start: int = 0) -> dict[Any, list[TaskSpec]]:
    """Round-robin assignment of tasks over live executors.

    With no executors nothing is assigned and the job stays pending.
    """
    out: dict[Any, list[TaskSpec]] = {e: [] for e in executors}
    if not executors:
        return out
    for i, t in enumerate(tasks):
        out[executors[(start + i) % len(executors)]].append(t)
    return out


def encode_partial(x: int, partial: FixedPoint) -> bytes:
    return json.dumps({"x": x, "partial": partial.to_json()}, sort_keys=True).encode()


def decode_partial(payload: bytes) -> tuple[int, FixedPoint]:
    obj = json.loads(payload)
    return obj["x"], FixedPoint.from_json(obj["partial"])


def run_worker(spec: TaskSpec) -> tuple[Any, list[ThreadMessage]]:
    """Execute a non-reduce task; returns the result payload and outgoing thread messages."""
    p = spec.payload
    if spec.kind is TaskKind.PI_TERM_RANGE:
        partial = arctan_reciprocal(p["x"], p["digits"], TermRange(p["start"], p["end"], p["x"]))
        msgs = []
        if spec.reducer_thread is not None:
            msgs.append(ThreadMessage(spec.job_id, spec.thread, spec.reducer_thread, 0,
                                      encode_partial(p["x"], partial)))
        return {"x": p["x"], "partial": partial.to_json()}, msgs
    if spec.kind is TaskKind.WEATHER_BATCH:
        consts = weather.PhysicalConstants(p["cp"], p["R"])
        return {"first": p["first"], "rows": weather.evaluate_batch(p["rows"], consts)}, []
    raise ValueError(f"{spec.kind} is not a worker task")


@dataclass
class Reducer:
    """Grid thread that gathers partial sums from its job's worker threads."""

    spec: TaskSpec
    partials: dict[int, tuple[int, FixedPoint]] = field(default_factory=dict)

    @property
    def expected(self) -> int:
        return self.spec.payload["expected"]

    def offer(self, m: ThreadMessage) -> bool:
        """Accept one partial; repeats from the same sender thread are ignored."""
        if m.from_thread in self.partials:
            return False
        self.partials[m.from_thread] = decode_partial(m.payload)
        return True

    @property
    def complete(self) -> bool:
        return len(self.partials) >= self.expected

    def result(self) -> dict:
        p = self.spec.payload
        by_x: dict[int, list[FixedPoint]] = {}
        for thread in sorted(self.partials):
            x, fp = self.partials[thread]
            by_x.setdefault(x, []).append(fp)
        return {"pi": combine_machin(p["digits"], p["guard"], by_x), "partials": len(self.partials)}
