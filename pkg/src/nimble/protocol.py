"""Node identities, message envelopes and length-prefixed framing.

Every frame on the wire (and in the journal and ledger files) is a 4-byte
big-endian unsigned length followed by that many bytes of UTF-8 JSON.
"""
from __future__ import annotations

import base64
import json
import struct
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, Optional

MAX_FRAME = 2**31 - 1
NIL_ID = uuid.UUID(int=0)

_LEN = struct.Struct(">I")


class ProtocolError(Exception):
    """Malformed frame, bad JSON or unknown message kind; fatal to the connection."""


class FrameTooLarge(ProtocolError):
    pass


class Role(str, Enum):
    MANAGER = "Manager"
    SUBMANAGER = "SubManager"
    EXECUTOR = "Executor"
    CLIENT = "Client"


class Kind(str, Enum):
    REGISTER = "Register"
    REGISTER_ACK = "RegisterAck"
    HEARTBEAT = "Heartbeat"
    TASK_ASSIGN = "TaskAssign"
    TASK_RESULT = "TaskResult"
    RESULT_ACK = "ResultAck"
    THREAD_MESSAGE = "ThreadMessage"
    SESSION_REPORT = "SessionReport"
    EPOCH_ANNOUNCE = "EpochAnnounce"
    JOURNAL_APPEND = "JournalAppend"
    SUBMIT_JOB = "SubmitJob"
    JOB_STATUS = "JobStatus"
    REPORT_QUERY = "ReportQuery"
    REPORT = "Report"
    SHUTDOWN = "Shutdown"


# Exact body field set per kind.
BODY_FIELDS: dict[Kind, frozenset[str]] = {
    # route and registered_at are null from the executor; the manager fills them in
    # before journaling the registration.
    Kind.REGISTER: frozenset(
        {"nonce", "label", "rate_minor_per_s", "holding", "route", "registered_at"}
    ),
    Kind.REGISTER_ACK: frozenset({"nonce", "node", "accepted", "reason"}),
    Kind.HEARTBEAT: frozenset({"journal_len", "address"}),
    Kind.TASK_ASSIGN: frozenset({"executor", "task", "assigned_at"}),
    Kind.TASK_RESULT: frozenset(
        {"job_id", "task_id", "executor", "payload", "wall_seconds", "error"}
    ),
    Kind.RESULT_ACK: frozenset({"executor", "job_id", "task_id"}),
    Kind.THREAD_MESSAGE: frozenset({"job_id", "from_thread", "to_thread", "seq", "payload"}),
    Kind.SESSION_REPORT: frozenset({"key", "node", "start", "stop", "work_seconds"}),
    Kind.EPOCH_ANNOUNCE: frozenset({"active", "standbys"}),
    Kind.JOURNAL_APPEND: frozenset({"seq", "entry"}),
    Kind.SUBMIT_JOB: frozenset({"job_id", "job_kind", "params"}),
    Kind.JOB_STATUS: frozenset(
        {"job_id", "state", "tasks_total", "tasks_done", "result", "executors_live"}
    ),
    Kind.REPORT_QUERY: frozenset({"as_of"}),
    Kind.REPORT: frozenset({"text", "total_minor", "rows"}),
    Kind.SHUTDOWN: frozenset({"reason"}),
}


@dataclass(frozen=True)
class NodeId:
    id: uuid.UUID
    role: Role

    @property
    def is_nil(self) -> bool:
        return self.id == NIL_ID

    @classmethod
    def new(cls, role: Role, rng=None) -> "NodeId":
        if rng is None:
            return cls(uuid.uuid4(), role)
        return cls(uuid.UUID(int=rng.getrandbits(128), version=4), role)

    @classmethod
    def nil(cls, role: Role) -> "NodeId":
        return cls(NIL_ID, role)

    def to_json(self) -> dict:
        return {"id": str(self.id), "role": self.role.value}

    @classmethod
    def from_json(cls, obj: Any) -> "NodeId":
        try:
            return cls(uuid.UUID(obj["id"]), Role(obj["role"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad node id: {obj!r}") from exc

    def short(self) -> str:
        return str(self.id)[:8]


@dataclass(frozen=True)
class WireMessage:
    kind: Kind
    sender: NodeId
    epoch: int
    body: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.epoch, int) or self.epoch < 0:
            raise ProtocolError(f"epoch must be a non-negative integer, got {self.epoch!r}")
        expected = BODY_FIELDS[self.kind]
        got = set(self.body)
        if got != expected:
            raise ProtocolError(
                f"{self.kind.value} body fields {sorted(got)} != {sorted(expected)}"
            )

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "sender": self.sender.to_json(),
            "epoch": self.epoch,
            "body": self.body,
        }

    @classmethod
    def from_json(cls, obj: Any) -> "WireMessage":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ProtocolError("frame body has no kind field")
        try:
            kind = Kind(obj["kind"])
        except ValueError:
            raise ProtocolError(f"unknown message kind {obj['kind']!r}") from None
        if not isinstance(obj.get("body"), dict):
            raise ProtocolError("frame body has no body object")
        epoch = obj.get("epoch")
        if isinstance(epoch, bool) or not isinstance(epoch, int):
            raise ProtocolError(f"bad epoch {epoch!r}")
        return cls(kind, NodeId.from_json(obj.get("sender")), epoch, obj["body"])


@dataclass(frozen=True)
class ThreadMessage:
    """A message between two grid threads of the same job."""

    job_id: str
    from_thread: int
    to_thread: int
    seq: int
    payload: bytes

    def __post_init__(self):
        if self.from_thread == self.to_thread:
            raise ValueError("a grid thread cannot message itself")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.job_id, self.from_thread, self.seq)

    def to_body(self) -> dict:
        return {
            "job_id": self.job_id,
            "from_thread": self.from_thread,
            "to_thread": self.to_thread,
            "seq": self.seq,
            "payload": base64.b64encode(self.payload).decode("ascii"),
        }

    @classmethod
    def from_body(cls, body: dict) -> "ThreadMessage":
        return cls(
            body["job_id"],
            body["from_thread"],
            body["to_thread"],
            body["seq"],
            base64.b64decode(body["payload"]),
        )


def encode_frame(obj: Any) -> bytes:
    data = json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("utf-8")
    if len(data) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(data)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(data)) + data


def decode_frame(buf: bytes | bytearray | memoryview, offset: int = 0) -> Optional[tuple[Any, int]]:
    """Decode one frame starting at ``offset``.

    Returns ``(obj, consumed)`` or ``None`` when the buffer holds only part of
    a frame.
    """
    view = memoryview(buf)[offset:]
    if len(view) < 4:
        return None
    (n,) = _LEN.unpack(view[:4])
    if n > MAX_FRAME:
        raise FrameTooLarge(f"declared frame length {n} exceeds {MAX_FRAME}")
    if len(view) < 4 + n:
        return None
    if n == 0:
        raise ProtocolError("empty frame has no kind field")
    try:
        obj = json.loads(bytes(view[4 : 4 + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"invalid frame JSON: {exc}") from None
    return obj, 4 + n


def encode(msg: WireMessage) -> bytes:
    return encode_frame(msg.to_json())


def decode(buf: bytes | bytearray | memoryview, offset: int = 0) -> Optional[tuple[WireMessage, int]]:
    """Decode the message at ``offset``; ``None`` means more data is needed."""
    got = decode_frame(buf, offset)
    if got is None:
        return None
    obj, consumed = got
    return WireMessage.from_json(obj), consumed


def decode_all(buf: bytes) -> list[WireMessage]:
    out = []
    offset = 0
    while offset < len(buf):
        got = decode(buf, offset)
        if got is None:
            raise ProtocolError(f"truncated frame at offset {offset}")
        msg, n = got
        out.append(msg)
        offset += n
    return out


def iter_frames(buf: bytes) -> Iterator[Any]:
    offset = 0
    while offset < len(buf):
        got = decode_frame(buf, offset)
        if got is None:
            # torn tail from a crash mid-append; everything before it is intact
            return
        obj, n = got
        yield obj
        offset += n


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf.extend(data)
        out = []
        offset = 0
        while True:
            got = decode(self._buf, offset)
            if got is None:
                break
            msg, n = got
            out.append(msg)
            offset += n
        del self._buf[:offset]
        return out


class Deduplicator:
    """Receiver-side dedup of at-least-once thread messages."""

    def __init__(self):
        self._seen: set[tuple[str, int, int]] = set()

    def accept(self, m: ThreadMessage) -> bool:
        if m.key in self._seen:
            return False
        self._seen.add(m.key)
        return True

    def forget_job(self, job_id: str) -> None:
        self._seen = {k for k in self._seen if k[0] != job_id}

    def __len__(self):
        return len(self._seen)


class EpochGuard:
    """Tracks the known manager epoch and fences messages from older ones."""

    def __init__(self, epoch: int = 0):
        self.epoch = epoch

    def admits(self, msg: WireMessage) -> bool:
        return msg.epoch >= self.epoch

    def announce(self, epoch: int) -> bool:
        """Accept an EpochAnnounce only if it moves the epoch forward."""
        if epoch <= self.epoch:
            return False
        self.epoch = epoch
        return True
