import random
import socket

import pytest

from nimble.cli import main
from nimble.ledger import Ledger
from nimble.weather import COLUMNS

from oracles import PI_120, random_row

T0 = 1_767_225_600.0


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ("NIMBLE_MANAGER_ADDR", "NIMBLE_DATA_DIR", "NIMBLE_RATE"):
        monkeypatch.delenv(var, raising=False)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.mark.parametrize("n", [1, 4])
def test_pi_simulated(capsys, n):
    code, out, _ = run(capsys, "pi", "--digits", "120", "--simulate", str(n))
    assert code == 0 and out == PI_120 + "\n"


def test_pi_one_digit(capsys):
    assert run(capsys, "pi", "--digits", "1", "--simulate", "2")[1] == "3.1\n"


def test_pi_no_executors(capsys):
    code, out, err = run(capsys, "pi", "--digits", "5", "--simulate", "0", "--timeout", "30")
    assert code == 4 and out == "" and "job pending: no executors" in err


def test_pi_bad_digits(capsys):
    assert run(capsys, "pi", "--digits", "0", "--simulate", "1")[0] == 5


def test_weather_zero_record(capsys, tmp_path):
    row = ["1"] + ["0"] * 16 + ["250", "50000"] + ["0"] * 7
    assert len(row) == len(COLUMNS)
    src, dst = tmp_path / "in.txt", tmp_path / "out.txt"
    src.write_text(" ".join(row) + "\n")
    code, out, _ = run(capsys, "weather", str(src), "-o", str(dst), "--simulate", "1")
    assert code == 0 and out == ""
    assert dst.read_text() == " ".join(["0.0000000000000000e+00"] * 5) + "\n"


def test_weather_bad_line(capsys, tmp_path):
    rng = random.Random(2)
    lines = [" ".join(repr(v) for v in random_row(rng)) for _ in range(10)]
    lines[6] = lines[6].replace(lines[6].split()[2], "north", 1)
    src, dst = tmp_path / "in.txt", tmp_path / "out.txt"
    src.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "weather", str(src), "-o", str(dst), "--simulate", "2")
    assert code == 5 and "line 7" in err
    assert not dst.exists()


def test_weather_distribution_invariance(capsys, tmp_path):
    rng = random.Random(8)
    src = tmp_path / "in.txt"
    src.write_text("".join(" ".join(repr(v) for v in random_row(rng)) + "\n" for _ in range(1000)))
    outs = []
    for n in (1, 4):
        dst = tmp_path / f"out{n}.txt"
        assert run(capsys, "weather", str(src), "-o", str(dst), "--simulate", str(n))[0] == 0
        outs.append(dst.read_bytes())
    assert outs[0] == outs[1] and outs[0].count(b"\n") == 1000


def test_report_fresh(capsys, tmp_path):
    code, out, _ = run(capsys, "report", "--data", str(tmp_path))
    assert code == 0 and out.splitlines()[-1] == "Total Amount : 0.00"


def test_report_from_data_dir(capsys, tmp_path):
    led = Ledger(tmp_path / "ledger.bin")
    led.register_node("a" * 32, "alpha", 2, T0)
    led.register_node("b" * 32, "beta", 2, T0 + 5)
    led.record_session("b" * 32, T0 + 10, T0 + 200, 160)
    fig = tmp_path / "fig" / "earnings.png"
    code, out, _ = run(capsys, "report", "--data", str(tmp_path), "--figure", str(fig))
    lines = out.splitlines()
    assert code == 0 and lines[-1] == "Total Amount : 3.20"
    assert lines[2].startswith("1 ") and lines[3].startswith("2 ")
    assert fig.stat().st_size > 1000


def test_report_tsv(capsys, tmp_path):
    led = Ledger(tmp_path / "ledger.bin")
    led.register_node("n1", "alpha", 2, T0)
    led.record_session("n1", T0, T0 + 170, 160)
    _, out, _ = run(capsys, "report", "--data", str(tmp_path), "--tsv")
    rows = [line.split("\t") for line in out.splitlines()]
    assert rows[0][0] == "serial" and rows[1][5:] == ["160", "2", "320"]
    assert rows[-1][-1] == "320"


def test_env_overrides_flag(capsys, tmp_path, monkeypatch):
    led = Ledger(tmp_path / "ledger.bin")
    led.register_node("n1", "alpha", 3, T0)
    led.record_session("n1", T0, T0 + 10, 10)
    monkeypatch.setenv("NIMBLE_DATA_DIR", str(tmp_path))
    _, out, _ = run(capsys, "report", "--data", str(tmp_path / "elsewhere"))
    assert out.splitlines()[-1] == "Total Amount : 0.30"


def test_report_unreachable(capsys):
    code, _, err = run(capsys, "report", "--connect", f"127.0.0.1:{free_port()}")
    assert code == 3 and "cannot reach" in err


def test_simulate_with_scenario(capsys, tmp_path):
    scen = tmp_path / "kill.txt"
    scen.write_text("AT 300 KILL_EXECUTOR 2\nAT 600 KILL_MANAGER\n")
    fig = tmp_path / "timeline.png"
    code, out, _ = run(capsys, "simulate", str(scen), "--executors", "4", "--digits", "120",
                       "--seed", "3", "--figure", str(fig))
    fields = dict(line.split("\t", 1) for line in out.splitlines())
    assert code == 0
    assert fields["result"] == PI_120 and fields["epoch"] == "2"
    assert fields["exactly_once"] == fields["billing_conserved"] == "True"
    assert fig.stat().st_size > 1000


def test_simulate_bad_scenario(capsys, tmp_path):
    scen = tmp_path / "bad.txt"
    scen.write_text("AT 10 KILL_EXECUTOR 9\n")
    assert run(capsys, "simulate", str(scen), "--executors", "2")[0] == 5
    scen.write_text("SOMETIME KILL\n")
    assert run(capsys, "simulate", str(scen))[0] == 5


def test_run_manager_port_in_use(capsys, tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        code, _, err = run(capsys, "run", "manager", "--listen", f"127.0.0.1:{port}", "--data", str(tmp_path))
    assert code == 2 and "cannot listen" in err


def test_run_executor_unreachable(capsys):
    code = main(["run", "executor", "--connect", f"127.0.0.1:{free_port()}", "--retries", "1"])
    capsys.readouterr()
    assert code == 3
