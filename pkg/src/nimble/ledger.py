"""Per-second metering of executor work in integer paise.

Money never touches a float: rates are paise per second, costs are paise, and
only :func:`rupees` inserts a decimal point.
"""
from __future__ import annotations

import datetime as dt
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .protocol import encode_frame, iter_frames

log = logging.getLogger(__name__)


class RegistrationRequired(LookupError):
    pass


class SessionValidationError(ValueError):
    pass


def price(work_seconds: int, rate_minor_per_s: int) -> int:
    if work_seconds < 0 or rate_minor_per_s < 0:
        raise ValueError("work and rate must be non-negative")
    return work_seconds * rate_minor_per_s


def rupees(minor: int) -> str:
    sign = "-" if minor < 0 else ""
    whole, paise = divmod(abs(minor), 100)
    return f"{sign}{whole}.{paise:02d}"


def _fmt_time(ts: float) -> str:
    t = dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc)
    hour = t.hour % 12 or 12
    return f"{t.month}/{t.day}/{t.year} {hour}:{t.minute:02d}:{t.second:02d}{'AM' if t.hour < 12 else 'PM'}"


@dataclass(frozen=True)
class NodeRecord:
    node: str
    label: str
    rate_minor_per_s: int
    registered_at: float

    def __post_init__(self):
        if self.rate_minor_per_s < 0:
            raise ValueError("rate must be non-negative")


@dataclass(frozen=True)
class SessionRecord:
    node: str
    start: float
    stop: float
    work_seconds: int
    cost_minor: int
    rate_minor_per_s: int
    key: Optional[str] = None


@dataclass(frozen=True)
class ReportRow:
    serial: int
    node: str
    label: str
    start: float
    stop: float
    work_seconds: int
    rate: int
    cost: int


@dataclass(frozen=True)
class LedgerReport:
    as_of: Optional[dt.date]
    rows: list[ReportRow]
    total_minor: int

    def render(self) -> str:
        headers = ["Sr. No.", "Manager Id", "Manager Host", "Start DateTime",
                   "Stop DateTime", "Work In Sec", "Rate/Sec", "Cost"]
        body = [
            [str(r.serial), r.node[:8], r.label, _fmt_time(r.start), _fmt_time(r.stop),
             str(r.work_seconds), f"{r.rate}.00", rupees(r.cost)]
            for r in self.rows
        ]
        widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
                  for i, h in enumerate(headers)]
        lines = ["Manager Price List"]
        if self.as_of is not None:
            lines.append(f"{self.as_of.month}/{self.as_of.day}/{self.as_of.year}")
        lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
        for row in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        lines.append(f"Total Amount : {rupees(self.total_minor)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> list[dict]:
        return [r.__dict__.copy() for r in self.rows]


class Ledger:
    """Append-only store of node records and billed sessions.

    With a ``path`` every record is appended as a length-prefixed JSON frame and
    the in-memory index is rebuilt from that file on construction.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.nodes: dict[str, NodeRecord] = {}
        self.sessions: list[SessionRecord] = []
        self._keys: set[str] = set()
        if self.path is not None and self.path.exists():
            for obj in iter_frames(self.path.read_bytes()):
                self._apply(obj)

    def _append(self, obj: dict) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fh.write(encode_frame(obj))
                fh.flush()
                os.fsync(fh.fileno())
        self._apply(obj)

    def _apply(self, obj: dict) -> None:
        if obj["kind"] == "node":
            rec = NodeRecord(obj["node"], obj["label"], obj["rate"], obj["registered_at"])
            prev = self.nodes.get(rec.node)
            # keep the first registration time; rate and label follow the latest record
            if prev is not None:
                rec = NodeRecord(rec.node, rec.label, rec.rate_minor_per_s, prev.registered_at)
            self.nodes[rec.node] = rec
        elif obj["kind"] == "session":
            s = SessionRecord(obj["node"], obj["start"], obj["stop"], obj["work_seconds"],
                              obj["cost"], obj["rate"], obj.get("key"))
            self.sessions.append(s)
            if s.key is not None:
                self._keys.add(s.key)
        else:
            log.warning("skipping unknown ledger record %r", obj.get("kind"))

    def reset(self) -> None:
        """Forget everything, including the backing file."""
        self.nodes.clear()
        self.sessions.clear()
        self._keys.clear()
        if self.path is not None and self.path.exists():
            self.path.write_bytes(b"")

    def register_node(self, node: str, label: str, rate_minor_per_s: int, registered_at: float) -> NodeRecord:
        prev = self.nodes.get(node)
        if prev is not None and prev.label == label and prev.rate_minor_per_s == rate_minor_per_s:
            return prev
        NodeRecord(node, label, rate_minor_per_s, registered_at)  # validates
        self._append({"kind": "node", "node": node, "label": label,
                      "rate": rate_minor_per_s, "registered_at": registered_at})
        return self.nodes[node]

    def record_session(self, node: str, start: float, stop: float, work_seconds: int,
                       key: Optional[str] = None) -> SessionRecord:
        rec = self.nodes.get(node)
        if rec is None:
            raise RegistrationRequired(f"node {node} is not registered")
        if key is not None and key in self._keys:
            return next(s for s in self.sessions if s.key == key)
        if stop < start:
            raise SessionValidationError("session stops before it starts")
        if work_seconds < 0 or work_seconds > stop - start:
            raise SessionValidationError(
                f"work_seconds={work_seconds} outside the {stop - start:.3f}s session window")
        cost = price(work_seconds, rec.rate_minor_per_s)
        self._append({"kind": "session", "node": node, "start": start, "stop": stop,
                      "work_seconds": work_seconds, "rate": rec.rate_minor_per_s, "cost": cost,
                      "key": key})
        return self.sessions[-1]

    def total_work_seconds(self) -> int:
        return sum(s.work_seconds for s in self.sessions)

    def audit(self) -> bool:
        """Recompute every cost from work and the rate in force for that session."""
        return all(
            s.cost_minor == price(s.work_seconds, s.rate_minor_per_s)
            for s in self.sessions
        )

    def report(self, as_of: Optional[dt.date] = None) -> LedgerReport:
        """Price list: one row per session, plus a zero row for idle nodes."""
        cutoff = None
        if as_of is not None:
            cutoff = dt.datetime.combine(as_of + dt.timedelta(days=1), dt.time(),
                                         tzinfo=dt.timezone.utc).timestamp()
        rows: list[ReportRow] = []
        for rec in self.nodes.values():
            if cutoff is not None and rec.registered_at >= cutoff:
                continue
            mine = [s for s in self.sessions
                    if s.node == rec.node and (cutoff is None or s.start < cutoff)]
            if not mine:
                rows.append(ReportRow(len(rows) + 1, rec.node, rec.label, rec.registered_at,
                                      rec.registered_at, 0, rec.rate_minor_per_s, 0))
            for s in sorted(mine, key=lambda s: s.start):
                rows.append(ReportRow(len(rows) + 1, rec.node, rec.label, s.start, s.stop,
                                      s.work_seconds, s.rate_minor_per_s, s.cost_minor))
        return LedgerReport(as_of, rows, sum(r.cost for r in rows))
