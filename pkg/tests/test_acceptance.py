"""Acceptance criteria, one test per criterion.

Each prints a PASS/FAIL line; the full list is repeated in the terminal
summary. Run with ``pytest tests/test_acceptance.py``.
"""
import datetime as dt
import decimal
import math
import random
import time
from dataclasses import replace

from nimble.cli import main
from nimble.ledger import Ledger, price, rupees
from nimble.precision import TermRange, arctan_reciprocal, fp_sum, machin_pi, terms_needed
from nimble.protocol import Kind, ThreadMessage, decode, decode_all, encode
from nimble.runtime.simulator import Grid, parse_scenario, simulate_pi
from nimble.runtime.tasks import JobState, decode_partial
from nimble.weather import (
    WeatherState, coriolis, evaluate_batch, format_batch, moisture_tendency, momentum_tendency,
    thermo_tendency,
)

from gen import wire_message
from oracles import PI_120, decimal_pi, mpmath_pi, random_row

T0 = 1_767_225_600.0


def test_c1_pi_any_executor_count(criterion, capsys, monkeypatch):
    monkeypatch.delenv("NIMBLE_MANAGER_ADDR", raising=False)
    reference = mpmath_pi(120)
    assert reference == PI_120
    with criterion(1, "pi --digits 120 on 1,2,3,4,8 simulated executors is byte-exact"):
        for n in (1, 2, 3, 4, 8):
            t0 = time.perf_counter()
            code = main(["pi", "--digits", "120", "--simulate", str(n)])
            out = capsys.readouterr().out
            assert time.perf_counter() - t0 < 1.0, f"N={n} too slow"
            assert code == 0 and out == reference + "\n", f"N={n}"


def test_c2_term_counts(criterion):
    with criterion(2, "terms_needed at one million digits within 1%", 1.0):
        assert 708_150 <= terms_needed(5, 10**6) <= 722_150
        assert 207_900 <= terms_needed(239, 10**6) <= 212_100


def test_c3_series_error_bound(criterion):
    with criterion(3, "truncated series within 10^(1-D) of exhaustive oracle", 1.0):
        for d in (20, 30, 40):
            got = decimal.Decimal(machin_pi(d))
            ref = decimal_pi(d + 30)
            assert abs(got - ref) < decimal.Decimal(10) ** (-d + 1), d


def test_c4_economic_arithmetic(criterion):
    with criterion(4, "160 s at 2 paise/s is 3.20; zero rows 0.00; fixture total 3.20"):
        assert price(160, 2) == 320 and rupees(320) == "3.20"
        led = Ledger()
        for i in range(12):
            led.register_node(f"{i:032x}", f"PC-{i + 1:02d}", 2, T0 + i)
        led.record_session(f"{10:032x}", T0 + 60, T0 + 240, 160)  # row 11 did the work
        rep = led.report(dt.date(2026, 1, 1))
        assert len(rep.rows) == 12 and rep.rows[10].cost == 320
        lines = rep.render().splitlines()
        zero_rows = [r for r in rep.rows if r.work_seconds == 0]
        assert len(zero_rows) == 11
        assert sum(1 for line in lines if line.rstrip().endswith(" 0.00")) == 11
        assert lines[-1] == "Total Amount : 3.20"


def test_c5_fault_tolerance(criterion):
    ref = simulate_pi(120, 4)[2]
    assert ref.state is JobState.DONE
    bound_ms = 120_000
    with criterion(5, "executor kill and manager kill give identical pi in bounded time", 10.0):
        for script in ("AT 300 KILL_EXECUTOR 2", "AT 500 KILL_MANAGER"):
            t0 = time.perf_counter()
            grid, job, st = simulate_pi(120, 4, scenario=parse_scenario(script), limit_ms=bound_ms)
            assert time.perf_counter() - t0 < 5.0, script
            assert st.state is JobState.DONE and st.result == ref.result == PI_120, script
            assert grid.fired and grid.sim.now_ms < 1000 + bound_ms
        assert grid.active.epoch == 2


def test_c6_reducer_partials(criterion):
    with criterion(6, "reducer gets exactly K partials under duplication; sum is bit-exact", 1.0):
        parts = 3
        grid = Grid.build(4)
        dups = {"n": 0, "busy": False}

        def duplicate(sim, src, dst, msg):
            if msg.kind is Kind.THREAD_MESSAGE and not dups["busy"]:
                dups["busy"] = True
                sim.send(src, dst, msg)
                dups["busy"] = False
                dups["n"] += 1

        grid.sim.add_hook(duplicate)
        job = grid.submit_pi(120, parts=parts)
        st = grid.run_job(job)
        k = 2 * parts
        assert st.result == PI_120 and dups["n"] >= k
        reduced = [e for e in grid.active.journal
                   if e.kind is Kind.TASK_RESULT and e.body["task_id"] == k]
        assert len(reduced) == 1 and reduced[0].body["payload"]["partials"] == k
        msgs = {(m.from_thread, m.seq): m for m in
                (ThreadMessage.from_body(e.body) for e in grid.active.journal
                 if e.kind is Kind.THREAD_MESSAGE)}
        assert len(msgs) == k
        by_x = {}
        for m in msgs.values():
            x, fp = decode_partial(m.payload)
            by_x.setdefault(x, []).append(fp)
        for x, partials in by_x.items():
            whole = arctan_reciprocal(x, 130, TermRange(0, terms_needed(x, 130), x))
            assert fp_sum(partials, 130) == whole


def _rel_ok(got, expect, scale, tol=1e-12):
    return abs(got - expect) <= tol * max(scale, 1e-300)


def test_c7_weather_properties(criterion, tmp_path, capsys):
    rng = random.Random(7)
    rows = [random_row(rng) for _ in range(1000)]
    with criterion(7, "weather zero forcing, Coriolis orthogonality, superposition, 1 vs 4 bytes", 2.0):
        for row in rows:
            s = WeatherState.from_row(row)
            quiet = WeatherState(rho=s.rho, grad_p=(0.0, 0.0, 0.0), V=s.V, omega_vec=(0.0, 0.0, 0.0), g=0.0,
                                 F=(0.0, 0.0, 0.0), Dm=(0.0, 0.0, 0.0), T=s.T, p=s.p, omega_v=0.0,
                                 Q_rad=0.0, Q_con=0.0, DH=0.0, E=0.0, C=0.0, Dq=0.0)
            assert momentum_tendency(quiet) == (0.0, 0.0, 0.0)
            assert thermo_tendency(quiet) == 0.0 and moisture_tendency(quiet) == 0.0

            c = coriolis(s.omega_vec, s.V)
            v2 = sum(x * x for x in s.V)
            om = math.sqrt(sum(x * x for x in s.omega_vec))
            assert abs(sum(a * b for a, b in zip(c, s.V))) <= 1e-12 * 2 * om * v2 + 1e-300

            # split F into two random shares
            w = rng.random()
            f1 = tuple(w * f for f in s.F)
            f2 = tuple(f - a for f, a in zip(s.F, f1))
            base = replace(s, F=(0.0, 0.0, 0.0))
            a = momentum_tendency(replace(s, F=f1))
            b = momentum_tendency(replace(s, F=f2))
            m0 = momentum_tendency(base)
            full = momentum_tendency(s)
            for i in range(3):
                scale = max(abs(a[i]), abs(b[i]), abs(m0[i]), abs(full[i]))
                assert _rel_ok(full[i], a[i] + b[i] - m0[i], 4 * scale)

            q1 = replace(s, Q_rad=s.Q_rad, Q_con=0.0, DH=0.0)
            q2 = replace(s, Q_rad=0.0, Q_con=s.Q_con, DH=s.DH)
            q0 = replace(s, Q_rad=0.0, Q_con=0.0, DH=0.0)
            t = [thermo_tendency(x) for x in (s, q1, q2, q0)]
            assert _rel_ok(t[0], t[1] + t[2] - t[3], 4 * max(map(abs, t)))

            e1 = replace(s, C=0.0, Dq=0.0)
            e2 = replace(s, E=0.0)
            mq = [moisture_tendency(x) for x in (s, e1, e2)]
            assert _rel_ok(mq[0], mq[1] + mq[2], 4 * max(map(abs, mq)))

        src = tmp_path / "states.txt"
        src.write_text("".join(" ".join(repr(v) for v in r) + "\n" for r in rows))
        outs = []
        for n in (1, 4):
            dst = tmp_path / f"out{n}.txt"
            assert main(["weather", str(src), "-o", str(dst), "--simulate", str(n)]) == 0
            outs.append(dst.read_bytes())
        capsys.readouterr()
        assert outs[0] == outs[1]
        assert outs[0].decode() == format_batch(evaluate_batch(rows))


def test_c8_protocol_round_trip(criterion):
    rng = random.Random(8)
    msgs = [wire_message(rng) for _ in range(10_000)]
    with criterion(8, "10k wire messages round-trip; concatenated frames keep count and order", 2.0):
        frames = []
        for m in msgs:
            f = encode(m)
            got, end = decode(f)
            assert got == m and end == len(f)
            frames.append(f)
        assert decode_all(b"".join(frames)) == msgs


def test_c9_billing_conservation(criterion):
    scenarios = ["", "AT 300 KILL_EXECUTOR 2", "AT 500 KILL_MANAGER",
                 "AT 200 KILL_EXECUTOR 1\nAT 400 KILL_EXECUTOR 3\nAT 5000 ADD_EXECUTOR",
                 "AT 300 PARTITION mgr-1 exec-1\nAT 9000 HEAL"]
    with criterion(9, "ledger work equals accepted results and totals recompute in every scenario"):
        for script in scenarios:
            for seed in (0, 1):
                grid, job, st = simulate_pi(120, 4, seed=seed, scenario=parse_scenario(script))
                assert st.state is JobState.DONE, script
                grid.sim.run_for(60_000)
                audit = grid.audit()
                assert audit["ledger_seconds"] == audit["accepted_seconds"], script
                assert audit["report_total"] == audit["recomputed_total"], script
                assert audit["billing"] and audit["exactly_once"], script
