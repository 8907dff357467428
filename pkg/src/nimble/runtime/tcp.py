"""Asyncio TCP driver for the node state machines, plus a blocking client."""
from __future__ import annotations

import asyncio
import itertools
import logging
import socket
import time
from typing import Callable, Optional

from ..protocol import FrameReader, Kind, NodeId, ProtocolError, Role, WireMessage, decode, encode
from .base import Node

log = logging.getLogger(__name__)

MANAGER_PORT = 7801
SUBMANAGER_PORT = 7802


class UpstreamUnreachable(ConnectionError):
    pass


def parse_address(text: str, default_port: int = MANAGER_PORT) -> tuple[str, int]:
    host, sep, port = text.strip().rpartition(":")
    if not sep:
        return text.strip() or "127.0.0.1", default_port
    return host or "127.0.0.1", int(port)


def format_address(host: str, port: int) -> str:
    return f"{host}:{port}"


class TcpDriver:
    """Runs one node: accepts inbound connections and dials outbound peers.

    Peers dialled by address are keyed by that address; inbound connections
    get a ``tcp:<n>`` key. All node calls happen on the event loop thread, so
    the node sees a single serialized stream of events.
    """

    def __init__(self, node: Node, listen: Optional[tuple[str, int]] = None, *,
                 tick: float = 0.1, max_connect_failures: Optional[int] = None,
                 on_receive: Optional[Callable[[Node], None]] = None):
        self.node = node
        self.listen = listen
        self.tick_interval = tick
        self.max_connect_failures = max_connect_failures
        self.on_receive = on_receive
        self.writers: dict[str, asyncio.StreamWriter] = {}
        self._dialing: dict[str, list[WireMessage]] = {}
        self._conn_ids = itertools.count(1)
        self._failures = 0
        self._ever_connected = False
        self.server: Optional[asyncio.base_events.Server] = None
        self.bound: Optional[tuple[str, int]] = None
        self._stop = asyncio.Event()
        self.exit_code = 0

    async def start(self) -> None:
        if self.listen is not None:
            self.server = await asyncio.start_server(self._accept, *self.listen)
            self.bound = self.server.sockets[0].getsockname()[:2]
            log.info("listening on %s:%d", *self.bound)
        self._dispatch(self.node.start(time.time()))

    async def run(self) -> int:
        await self.start()
        return await self.run_started()

    async def run_started(self) -> int:
        try:
            while not self._stop.is_set() and not self.node.stopped:
                self._dispatch(self.node.tick(time.time()))
                try:
                    await asyncio.wait_for(self._stop.wait(), self.tick_interval)
                except asyncio.TimeoutError:
                    pass
        finally:
            await self.close()
        return self.exit_code

    def stop(self, code: int = 0) -> None:
        self.exit_code = code
        self._stop.set()

    async def close(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        for w in list(self.writers.values()):
            w.close()
        self.writers.clear()

    # -- outbound ----------------------------------------------------------

    def _dispatch(self, sends) -> None:
        for peer, msg in sends:
            w = self.writers.get(peer)
            if w is not None and not w.is_closing():
                w.write(encode(msg))
            elif peer.startswith("tcp:"):
                log.debug("dropping %s for closed connection %s", msg.kind.value, peer)
            elif peer in self._dialing:
                self._dialing[peer].append(msg)
            else:
                self._dialing[peer] = [msg]
                asyncio.get_running_loop().create_task(self._dial(peer))

    async def _dial(self, address: str) -> None:
        host, port = parse_address(address)
        try:
            reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), 5.0)
        except (OSError, asyncio.TimeoutError) as exc:
            self._dialing.pop(address, None)
            self._failures += 1
            log.warning("cannot reach %s: %s", address, exc)
            if self.max_connect_failures is not None and self._failures >= self.max_connect_failures:
                log.error("giving up after %d failed connection attempts", self._failures)
                self.stop(3)
            return
        self._failures = 0
        self._ever_connected = True
        self.writers[address] = writer
        for msg in self._dialing.pop(address, []):
            writer.write(encode(msg))
        await self._read_loop(address, reader, writer)

    # -- inbound -----------------------------------------------------------

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = f"tcp:{next(self._conn_ids)}"
        self.writers[peer] = writer
        await self._read_loop(peer, reader, writer)

    async def _read_loop(self, peer: str, reader: asyncio.StreamReader,
                         writer: asyncio.StreamWriter) -> None:
        frames = FrameReader()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for msg in frames.feed(data):
                    self._dispatch(self.node.receive(peer, msg, time.time()))
                    if self.on_receive is not None:
                        self.on_receive(self.node)
        except ProtocolError as exc:
            log.error("protocol error from %s: %s; closing", peer, exc)
        except (ConnectionError, OSError) as exc:
            log.info("connection %s lost: %s", peer, exc)
        finally:
            if self.writers.get(peer) is writer:
                del self.writers[peer]
            writer.close()
            self._dispatch(self.node.disconnected(peer, time.time()))


class Client:
    """Blocking request/response client for the CLI commands."""

    def __init__(self, addresses: list[str], timeout: float = 5.0):
        self.addresses = addresses
        self.timeout = timeout
        self.node = NodeId.new(Role.CLIENT)
        self.sock: Optional[socket.socket] = None
        self.connected_to: Optional[str] = None
        self._buf = bytearray()

    def connect(self) -> None:
        errors = []
        for addr in self.addresses:
            try:
                self.sock = socket.create_connection(parse_address(addr), timeout=self.timeout)
                self.connected_to = addr
                self._buf.clear()
                return
            except OSError as exc:
                errors.append(f"{addr}: {exc}")
        raise UpstreamUnreachable("; ".join(errors) or "no manager address given")

    def close(self) -> None:
        if self.sock is not None:
            self.sock.close()
            self.sock = None

    def request(self, kind: Kind, body: dict, expect: Kind) -> WireMessage:
        if self.sock is None:
            self.connect()
        assert self.sock is not None
        self.sock.sendall(encode(WireMessage(kind, self.node, 0, body)))
        deadline = time.monotonic() + self.timeout
        while True:
            got = decode(self._buf)
            if got is not None:
                msg, n = got
                del self._buf[:n]
                if msg.kind is expect:
                    return msg
                continue
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no {expect.value} from {self.connected_to}")
            self.sock.settimeout(remaining)
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                raise TimeoutError(f"no {expect.value} from {self.connected_to}") from None
            if not data:
                raise ConnectionError(f"{self.connected_to} closed the connection")
            self._buf.extend(data)

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
