"""Sub-manager: a relay between a group of executors and the manager.

It holds no scheduling authority. Upstream traffic is forwarded verbatim;
downstream traffic is routed to the right executor using what the relay has
seen pass through (registration nonces, executor ids, task placements).
"""
from __future__ import annotations

import logging
from typing import Optional

from ..protocol import EpochGuard, Kind, NodeId, Role, WireMessage
from .base import Node, Sends, Timing

log = logging.getLogger(__name__)


class SubManager(Node):
    def __init__(self, upstreams: list[str], *, node: Optional[NodeId] = None,
                 timing: Timing = Timing(), rng=None):
        super().__init__()
        self.upstreams = list(upstreams)
        self.upstream = self.upstreams[0]
        self.node = node or NodeId.new(Role.SUBMANAGER, rng)
        self.timing = timing
        self.guard = EpochGuard()
        self.routes: dict[str, str] = {}          # executor id -> downstream peer
        self.nonces: dict[str, str] = {}          # registration nonce -> downstream peer
        self.hosts: dict[tuple[str, int], str] = {}  # (job, thread) -> executor id
        self._last_heard = 0.0
        self._next_beat = 0.0
        self.forwarded = 0

    @property
    def epoch(self) -> int:
        return self.guard.epoch

    def start(self, now: float) -> Sends:
        self._last_heard = now
        return self._drain()

    def _downstream_peers(self) -> list[str]:
        return sorted(set(self.routes.values()) | set(self.nonces.values()))

    def receive(self, peer: str, msg: WireMessage, now: float) -> Sends:
        if msg.sender.role is Role.EXECUTOR:
            if not msg.sender.is_nil:
                self.routes[str(msg.sender.id)] = peer
            if msg.kind is Kind.REGISTER:
                self.nonces[msg.body["nonce"]] = peer
            self._send(self.upstream, msg)
            self.forwarded += 1
        elif msg.sender.role is Role.MANAGER:
            self._from_manager(peer, msg, now)
        return self._drain()

    def _from_manager(self, peer: str, msg: WireMessage, now: float) -> None:
        b = msg.body
        if msg.kind is Kind.EPOCH_ANNOUNCE:
            if self.guard.announce(msg.epoch):
                self.upstream = peer
                self._last_heard = now
                for p in self._downstream_peers():
                    self._send(p, msg)
            return
        if peer == self.upstream:
            self._last_heard = now
        if msg.epoch > self.guard.epoch:
            self.guard.epoch = msg.epoch
        target: Optional[str] = None
        if msg.kind is Kind.REGISTER_ACK:
            target = self.nonces.pop(b["nonce"], None)
            if target is not None and b["accepted"]:
                self.routes[b["node"]["id"]] = target
        elif msg.kind is Kind.TASK_ASSIGN:
            ex = b["executor"]["id"]
            self.hosts[(b["task"]["job_id"], b["task"]["task_id"])] = ex
            target = self.routes.get(ex)
        elif msg.kind is Kind.RESULT_ACK:
            target = self.routes.get(b["executor"]["id"])
        elif msg.kind is Kind.THREAD_MESSAGE:
            ex = self.hosts.get((b["job_id"], b["to_thread"]))
            target = self.routes.get(ex) if ex else None
        elif msg.kind is Kind.SHUTDOWN:
            for p in self._downstream_peers():
                self._send(p, msg)
            return
        elif msg.kind is Kind.HEARTBEAT:
            return
        if target is None:
            log.info("sub-manager: no downstream route for %s", msg.kind.value)
            return
        self._send(target, msg)
        self.forwarded += 1

    def tick(self, now: float) -> Sends:
        if now - self._last_heard > self.timing.dead_after and len(self.upstreams) > 1:
            i = self.upstreams.index(self.upstream) if self.upstream in self.upstreams else -1
            self.upstream = self.upstreams[(i + 1) % len(self.upstreams)]
            self._last_heard = now
            log.info("sub-manager switching upstream to %s", self.upstream)
        if now >= self._next_beat:
            self._next_beat = now + self.timing.heartbeat
            beat = self._msg(Kind.HEARTBEAT, journal_len=0, address="")
            self._send(self.upstream, beat)
            for p in self._downstream_peers():
                self._send(p, beat)
        return self._drain()

    def disconnected(self, peer: str, now: float) -> Sends:
        self.routes = {k: v for k, v in self.routes.items() if v != peer}
        self.nonces = {k: v for k, v in self.nonces.items() if v != peer}
        return self._drain()

