"""Pieces shared by the manager, sub-manager and executor state machines.

Node logic is transport-free: every entry point takes the current time and
returns a list of ``(peer, message)`` sends. The simulator and the TCP driver
decide how those sends travel.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..protocol import Kind, NodeId, WireMessage

Sends = list[tuple[str, WireMessage]]


@dataclass(frozen=True)
class Timing:
    heartbeat: float = 2.0
    missed_beats: int = 3
    task_timeout: float = 30.0

    @property
    def dead_after(self) -> float:
        return self.heartbeat * self.missed_beats


class Node:
    node: NodeId
    epoch: int

    def __init__(self):
        self._out: Sends = []
        self.stopped = False

    def _send(self, peer: str, msg: WireMessage) -> None:
        self._out.append((peer, msg))

    def _msg(self, kind: Kind, **body) -> WireMessage:
        return WireMessage(kind, self.node, self.epoch, body)

    def _drain(self) -> Sends:
        out, self._out = self._out, []
        return out

    def start(self, now: float) -> Sends:
        return self._drain()

    def receive(self, peer: str, msg: WireMessage, now: float) -> Sends:
        raise NotImplementedError

    def tick(self, now: float) -> Sends:
        return self._drain()

    def disconnected(self, peer: str, now: float) -> Sends:
        return self._drain()
