"""Command-line entry points.

Exit codes: 0 ok, 1 job failed or timed out, 2 cannot bind, 3 cannot reach a
manager, 4 job pending with no executors, 5 bad input.
"""
from __future__ import annotations

import argparse
import asyncio
import datetime as dt
import json
import logging
import os
import signal
import socket
import sys
import tempfile
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import weather
from .ledger import Ledger, LedgerReport, ReportRow
from .protocol import Kind, NodeId, Role
from .runtime.base import Timing
from .runtime.executor import Executor
from .runtime.journal import Journal
from .runtime.manager import Manager
from .runtime.simulator import BASE_TIME, Grid, ScenarioError, parse_scenario
from .runtime.submanager import SubManager
from .runtime.tasks import JobKind, JobState
from .runtime.tcp import (MANAGER_PORT, SUBMANAGER_PORT, Client, TcpDriver, UpstreamUnreachable,
                          parse_address)

log = logging.getLogger("nimble")

EXIT_OK, EXIT_FAILED, EXIT_BIND, EXIT_CONNECT, EXIT_NO_EXECUTORS, EXIT_INPUT = 0, 1, 2, 3, 4, 5

ENV_MANAGER = "NIMBLE_MANAGER_ADDR"
ENV_DATA = "NIMBLE_DATA_DIR"
ENV_RATE = "NIMBLE_RATE"

DEFAULT_RATE = 2
POLL_INTERVAL = 0.25


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class JobOutcome:
    state: JobState
    result: object
    executors_live: int


# -- configuration ---------------------------------------------------------

def _env_or(flag, env: str, cast=str):
    """Environment variables take precedence over flags."""
    raw = os.environ.get(env)
    if raw is None or raw == "":
        return flag
    try:
        return cast(raw)
    except ValueError:
        raise CliError(EXIT_INPUT, f"{env}={raw!r} is not valid") from None


def _addresses(text: Optional[str], default_port: int = MANAGER_PORT) -> list[str]:
    text = _env_or(text, ENV_MANAGER) or f"127.0.0.1:{default_port}"
    out = []
    for part in text.split(","):
        if part.strip():
            host, port = parse_address(part, default_port)
            out.append(f"{host}:{port}")
    return out


def _listen(text: str, default_port: int) -> tuple[str, int]:
    host, sep, port = text.strip().rpartition(":")
    if not sep:
        host, port = text.strip(), str(default_port)
    try:
        return host or "0.0.0.0", int(port)
    except ValueError:
        raise CliError(EXIT_INPUT, f"bad listen address {text!r}") from None


def _data_dir(flag: Optional[str]) -> Optional[Path]:
    value = _env_or(flag, ENV_DATA)
    return Path(value) if value else None


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"data directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise CliError(EXIT_INPUT, f"data directory {path} is not writable")
    return path


def _load_id(path: Path, role: Role) -> Optional[NodeId]:
    if not path.exists():
        return None
    node = NodeId.from_json(json.loads(path.read_text()))
    return node if node.role is role else None


def _save_id(path: Path, node: NodeId) -> None:
    if node.is_nil:
        return
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(node.to_json()))
    os.replace(tmp, path)


# -- run -------------------------------------------------------------------

def _serve(driver: TcpDriver) -> int:
    async def main() -> int:
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, driver.stop, 0)
            except (NotImplementedError, RuntimeError):
                pass
        try:
            await driver.start()
        except OSError as exc:
            raise CliError(EXIT_BIND, f"cannot listen on {driver.listen[0]}:{driver.listen[1]}: "
                                      f"{exc.strerror or exc}") from None
        return await driver.run_started()
    return asyncio.run(main())


def cmd_run(args: argparse.Namespace) -> int:
    timing = Timing()
    if args.role == "manager":
        listen = _listen(args.listen or f":{MANAGER_PORT}", MANAGER_PORT)
        data = _data_dir(args.data)
        if data is None:
            raise CliError(EXIT_INPUT, f"manager needs --data or {ENV_DATA}")
        _writable_dir(data)
        advertise = args.advertise or f"{'127.0.0.1' if listen[0] in ('', '0.0.0.0') else listen[0]}:{listen[1]}"
        peers = [a for a in _split(args.peers) if a != advertise]
        id_file = data / "manager.id"
        node = _load_id(id_file, Role.MANAGER) or NodeId.new(Role.MANAGER)
        _save_id(id_file, node)
        mgr = Manager(advertise, [advertise] + peers, node=node, timing=timing, standby=args.standby,
                      journal=Journal(data / "journal.bin"), ledger=Ledger(data / "ledger.bin"),
                      results_dir=data / "results", stable_routes=False)
        log.info("manager %s at %s (standby=%s, peers=%s)", node.short(), advertise, args.standby, peers)
        return _serve(TcpDriver(mgr, listen))
    if args.role == "submanager":
        listen = _listen(args.listen or f":{SUBMANAGER_PORT}", SUBMANAGER_PORT)
        sub = SubManager(_addresses(args.connect), timing=timing)
        return _serve(TcpDriver(sub, listen, max_connect_failures=args.retries))
    # executor
    rate = _env_or(args.rate, ENV_RATE, int)
    if rate is None:
        rate = DEFAULT_RATE
    if rate < 0:
        raise CliError(EXIT_INPUT, "rate must be non-negative")
    data = _data_dir(args.data)
    node = None
    id_file = None
    if data is not None:
        id_file = _writable_dir(data) / "executor.id"
        node = _load_id(id_file, Role.EXECUTOR)
    pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="nimble-task")
    ex = Executor(_addresses(args.connect, SUBMANAGER_PORT if args.via_submanager else MANAGER_PORT),
                  label=args.label or socket.gethostname(), rate_minor_per_s=rate, node=node,
                  timing=timing, pool=pool)
    seen = {"id": ex.node}

    def persist(n) -> None:
        if id_file is not None and n.node != seen["id"]:
            seen["id"] = n.node
            _save_id(id_file, n.node)

    try:
        return _serve(TcpDriver(ex, None, max_connect_failures=args.retries, on_receive=persist))
    finally:
        pool.shutdown(wait=False, cancel_futures=True)


def _split(text: Optional[str]) -> list[str]:
    return [f"{h}:{p}" for h, p in (parse_address(a) for a in (text or "").split(",") if a.strip())]


# -- jobs ------------------------------------------------------------------

def _run_remote(addresses: list[str], kind: JobKind, params: dict, timeout: float) -> JobOutcome:
    body = {"job_id": f"job-{uuid.uuid4().hex[:12]}", "job_kind": kind.value, "params": params}
    deadline = time.monotonic() + timeout
    client = Client(addresses, timeout=min(5.0, timeout))
    answered = False
    failures = 0
    last: Optional[JobOutcome] = None
    try:
        while True:
            try:
                msg = client.request(Kind.SUBMIT_JOB, body, Kind.JOB_STATUS)
                answered = True
                b = msg.body
                last = JobOutcome(JobState(b["state"]), b["result"], b["executors_live"])
                if last.state in (JobState.DONE, JobState.FAILED):
                    return last
            except UpstreamUnreachable as exc:
                failures += 1
                if not answered and failures >= 3:
                    raise CliError(EXIT_CONNECT, f"cannot reach a manager: {exc}") from None
            except (TimeoutError, ConnectionError, OSError) as exc:
                log.info("manager %s not answering (%s); trying the next address",
                         client.connected_to, exc)
                client.close()
                addresses.append(addresses.pop(0))
            if time.monotonic() >= deadline:
                break
            time.sleep(POLL_INTERVAL)
    finally:
        client.close()
    if last is None:
        raise CliError(EXIT_CONNECT, "no manager answered before the deadline")
    if last.executors_live == 0 and last.state is JobState.PENDING:
        raise CliError(EXIT_NO_EXECUTORS, "job pending: no executors")
    raise CliError(EXIT_FAILED, f"job still {last.state.value} after {timeout:g}s")


def _run_simulated(n_executors: int, kind: JobKind, params: dict, timeout: float, seed: int) -> JobOutcome:
    grid = Grid.build(n_executors, seed=seed)
    job = grid.submit(kind, params)
    st = grid.run_job(job, limit_ms=int(timeout * 1000))
    live = grid.active.live_count()
    if st.state is JobState.PENDING and live == 0:
        raise CliError(EXIT_NO_EXECUTORS, "job pending: no executors")
    return JobOutcome(st.state, st.result, live)


def _run_job(args: argparse.Namespace, kind: JobKind, params: dict) -> object:
    if args.simulate is not None:
        out = _run_simulated(args.simulate, kind, params, args.timeout, args.seed)
    else:
        out = _run_remote(_addresses(args.connect), kind, params, args.timeout)
    if out.state is not JobState.DONE:
        raise CliError(EXIT_FAILED, f"job ended {out.state.value}")
    return out.result


def cmd_pi(args: argparse.Namespace) -> int:
    if args.digits < 1:
        raise CliError(EXIT_INPUT, "--digits must be at least 1")
    if args.parts < 1:
        raise CliError(EXIT_INPUT, "--parts must be at least 1")
    result = _run_job(args, JobKind.PI, {"digits": args.digits, "guard": args.guard, "parts": args.parts})
    sys.stdout.write(f"{result}\n")
    return EXIT_OK


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def cmd_weather(args: argparse.Namespace) -> int:
    src, dst = Path(args.input), Path(args.output)
    try:
        text = src.read_text()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"{src}: {exc.strerror or exc}") from None
    try:
        states = weather.parse_batch(text)
    except weather.BatchFormatError as exc:
        raise CliError(EXIT_INPUT, f"{src}: line {exc.line}: {exc}") from None
    if not dst.parent.is_dir():
        raise CliError(EXIT_INPUT, f"output directory {dst.parent} does not exist")
    params = {"rows": [s.to_row() for s in states], "parts": args.parts}
    result = _run_job(args, JobKind.WEATHER, params) if states else []
    _atomic_write(dst, weather.format_batch(result))
    log.info("wrote %d tendency rows to %s", len(result), dst)
    return EXIT_OK


# -- report ----------------------------------------------------------------

def _report_tsv(rep: LedgerReport) -> str:
    lines = ["serial\tnode\tlabel\tstart\tstop\twork_seconds\trate_minor_per_s\tcost_minor"]
    for r in rep.rows:
        lines.append(f"{r.serial}\t{r.node}\t{r.label}\t{r.start:.3f}\t{r.stop:.3f}\t"
                     f"{r.work_seconds}\t{r.rate}\t{r.cost}")
    lines.append(f"total\t\t\t\t\t{sum(r.work_seconds for r in rep.rows)}\t\t{rep.total_minor}")
    return "\n".join(lines) + "\n"


def _fetch_report(args: argparse.Namespace, as_of: Optional[dt.date]) -> LedgerReport:
    if args.data is not None:
        data = _data_dir(args.data)
        path = data / "ledger.bin"
        if not path.exists():
            log.info("no ledger at %s; reporting an empty grid", path)
        return (Ledger(path) if path.exists() else Ledger()).report(as_of)
    body = {"as_of": as_of.isoformat() if as_of else None}
    addresses = _addresses(args.connect)
    for _ in range(len(addresses)):
        try:
            with Client(addresses, timeout=args.timeout) as client:
                msg = client.request(Kind.REPORT_QUERY, body, Kind.REPORT)
            rows = [ReportRow(**r) for r in msg.body["rows"]]
            return LedgerReport(as_of, rows, msg.body["total_minor"])
        except UpstreamUnreachable as exc:
            raise CliError(EXIT_CONNECT, f"cannot reach a manager: {exc}") from None
        except (TimeoutError, ConnectionError, OSError) as exc:
            log.info("no report from %s (%s)", addresses[0], exc)
            addresses.append(addresses.pop(0))
    raise CliError(EXIT_CONNECT, "no active manager answered the report query")


def cmd_report(args: argparse.Namespace) -> int:
    try:
        as_of = dt.date.fromisoformat(args.as_of) if args.as_of else None
    except ValueError:
        raise CliError(EXIT_INPUT, f"--as-of {args.as_of!r} is not YYYY-MM-DD") from None
    rep = _fetch_report(args, as_of)
    sys.stdout.write(_report_tsv(rep) if args.tsv else rep.render())
    if args.figure:
        from .plotting import earnings_figure
        earnings_figure(rep, args.figure)
    return EXIT_OK


# -- simulate --------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    events = []
    if args.scenario:
        try:
            events = parse_scenario(Path(args.scenario).read_text())
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"{args.scenario}: {exc.strerror or exc}") from None
        except ScenarioError as exc:
            raise CliError(EXIT_INPUT, f"{args.scenario}: {exc}") from None
    if args.executors > 0 and any(e.action == "KILL_EXECUTOR" and int(e.args[0]) > args.executors
                                  for e in events):
        raise CliError(EXIT_INPUT, "scenario kills an executor that does not exist")
    grid = Grid.build(args.executors, n_managers=args.managers, n_submanagers=args.submanagers,
                      seed=args.seed)
    started = grid.sim.now_ms
    job = grid.submit_pi(args.digits, parts=args.parts)
    grid.apply_scenario(events)
    st = grid.run_job(job, limit_ms=int(args.timeout * 1000))
    audit = grid.audit(job)
    m = grid.active
    fields = [
        ("job", job), ("state", st.state.value), ("tasks_done", st.tasks_done),
        ("tasks_total", st.tasks_total), ("virtual_ms", grid.sim.now_ms - started),
        ("epoch", m.epoch), ("active_manager", m.address), ("live_executors", m.live_count()),
        ("messages_delivered", grid.sim.delivered), ("messages_dropped", grid.sim.dropped),
        ("exactly_once", audit["exactly_once"]), ("billing_conserved", audit["billing"]),
        ("work_seconds", audit["ledger_seconds"]), ("total_minor", audit["report_total"]),
        ("result", st.result if st.result is not None else ""),
    ]
    sys.stdout.write("".join(f"{k}\t{v}\n" for k, v in fields))
    if args.figure:
        from .plotting import timeline_figure
        labels = {k: e.label for k, e in m.registry.items()}
        origin = BASE_TIME + started / 1000
        timeline_figure(m.ledger.sessions, labels, args.figure, origin=origin,
                        events=[((t - started) / 1000, name) for t, name in grid.fired])
    if st.state is JobState.DONE:
        return EXIT_OK
    if st.state is JobState.PENDING and m.live_count() == 0:
        raise CliError(EXIT_NO_EXECUTORS, "job pending: no executors")
    return EXIT_FAILED


def cmd_shutdown(args: argparse.Namespace) -> int:
    from .protocol import WireMessage, encode
    addresses = _addresses(args.connect)
    sent = 0
    for addr in addresses:
        try:
            with socket.create_connection(parse_address(addr), timeout=2.0) as s:
                s.sendall(encode(WireMessage(Kind.SHUTDOWN, NodeId.new(Role.CLIENT), 0,
                                             {"reason": args.reason})))
                sent += 1
        except OSError as exc:
            log.warning("cannot reach %s: %s", addr, exc)
    if not sent:
        raise CliError(EXIT_CONNECT, "no manager reachable")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nimble", description="Desktop grid: managers, relays, executors.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="serve one node role until shutdown")
    r.add_argument("role", choices=["manager", "submanager", "executor"])
    r.add_argument("--listen", help="bind address, [host]:port")
    r.add_argument("--connect", help=f"upstream address(es), comma separated (env {ENV_MANAGER})")
    r.add_argument("--data", help=f"state directory (env {ENV_DATA})")
    r.add_argument("--rate", type=int, help=f"executor price in paise per second (env {ENV_RATE})")
    r.add_argument("--label", help="executor host label shown in the price list")
    r.add_argument("--standby", action="store_true", help="start a manager as standby")
    r.add_argument("--peers", help="other managers in the failover group, comma separated")
    r.add_argument("--advertise", help="address other managers use to reach this one")
    r.add_argument("--via-submanager", action="store_true",
                   help="default upstream port is the sub-manager port")
    r.add_argument("--retries", type=int, default=10, help="connection attempts before giving up")
    r.set_defaults(func=cmd_run)

    def job_opts(q: argparse.ArgumentParser) -> None:
        where = q.add_mutually_exclusive_group()
        where.add_argument("--connect", help=f"manager address(es) (env {ENV_MANAGER})")
        where.add_argument("--simulate", type=int, metavar="N",
                           help="run on an in-process simulated grid of N executors")
        q.add_argument("--parts", type=int, default=4, help="partitions per series or batch")
        q.add_argument("--timeout", type=float, default=120.0, help="seconds to wait for the result")
        q.add_argument("--seed", type=int, default=0, help="simulator seed")

    q = sub.add_parser("pi", help="compute pi on the grid")
    q.add_argument("--digits", type=int, required=True)
    q.add_argument("--guard", type=int, default=10, help="extra internal digits")
    job_opts(q)
    q.set_defaults(func=cmd_pi)

    w = sub.add_parser("weather", help="evaluate a batch of weather states on the grid")
    w.add_argument("input")
    w.add_argument("-o", "--output", required=True)
    job_opts(w)
    w.set_defaults(func=cmd_weather)

    rep = sub.add_parser("report", help="print the manager price list")
    rep.add_argument("--connect", help=f"manager address(es) (env {ENV_MANAGER})")
    rep.add_argument("--data", help=f"read the ledger from a manager data directory (env {ENV_DATA})")
    rep.add_argument("--as-of", help="date printed under the title, YYYY-MM-DD")
    rep.add_argument("--tsv", action="store_true", help="tab-separated rows instead of the table")
    rep.add_argument("--figure", help="also write an earnings bar chart to this image file")
    rep.add_argument("--timeout", type=float, default=5.0)
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("simulate", help="run a pi job on a simulated grid under a fault scenario")
    s.add_argument("scenario", nargs="?", help="file of 'AT <ms> <EVENT>' lines")
    s.add_argument("--executors", type=int, default=4)
    s.add_argument("--managers", type=int, default=2)
    s.add_argument("--submanagers", type=int, default=0)
    s.add_argument("--digits", type=int, default=120)
    s.add_argument("--parts", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timeout", type=float, default=600.0, help="virtual seconds")
    s.add_argument("--figure", help="write a timeline of executor work to this image file")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("shutdown", help="ask managers to stop cleanly")
    d.add_argument("--connect", help=f"manager address(es) (env {ENV_MANAGER})")
    d.add_argument("--reason", default="operator request")
    d.set_defaults(func=cmd_shutdown)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    default = logging.INFO if args.command == "run" else logging.WARNING
    level = max(logging.DEBUG, default - 10 * args.verbose)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"nimble: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
