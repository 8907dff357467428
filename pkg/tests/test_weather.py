import math
import random

import pytest
from hypothesis import given, strategies as st

from nimble.weather import (
    COLUMNS, EARTH_OMEGA, N_COLUMNS, STANDARD_G, BatchFormatError, PhysicalConstants, WeatherDomainError,
    WeatherState, coriolis, evaluate_all, evaluate_batch, format_batch, format_row, moisture_tendency,
    momentum_tendency, parse_batch, thermo_tendency, write_batch,
)

from oracles import random_row

ZERO = (0.0, 0.0, 0.0)


def state(**kw) -> WeatherState:
    base = dict(rho=1.0, grad_p=ZERO, V=ZERO, omega_vec=ZERO, g=0.0, F=ZERO, Dm=ZERO,
                T=250.0, p=50000.0, omega_v=0.0, Q_rad=0.0, Q_con=0.0, DH=0.0, E=0.0, C=0.0, Dq=0.0)
    base.update(kw)
    return WeatherState(**base)


def close(a, b, rel=1e-12):
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-300)


def test_column_count():
    assert N_COLUMNS == 26 == len(set(COLUMNS))


def test_zero_forcing_momentum():
    assert momentum_tendency(state(V=(3.0, -2.0, 1.0))) == ZERO


def test_coriolis_and_gravity_by_hand():
    s = state(omega_vec=(0.0, 0.0, EARTH_OMEGA), V=(10.0, 0.0, 0.0), g=STANDARD_G)
    dv = momentum_tendency(s)
    assert dv[0] == 0.0
    assert close(dv[1], -1.45842318e-3)
    assert dv[2] == -9.80665


def test_coriolis_parallel_is_zero():
    assert coriolis((0.0, 0.0, 1e-4), (0.0, 0.0, 5.0)) == ZERO


def test_pressure_gradient_scales_with_specific_volume():
    dv = momentum_tendency(state(rho=2.0, grad_p=(4.0, -6.0, 0.0)))
    assert dv == (-2.0, 3.0, 0.0)


def test_density_domain():
    with pytest.raises(WeatherDomainError):
        momentum_tendency(state(rho=0.0))


def test_thermo_by_hand():
    c = PhysicalConstants(cp=1004.0, R=287.0)
    s = state(Q_rad=1004.0, T=250.0, p=50000.0, omega_v=0.1)
    assert close(thermo_tendency(s, c), 1.1435)
    assert close(thermo_tendency(state(Q_rad=1004.0, omega_v=0.1, DH=-0.5), c), 0.6435)
    assert thermo_tendency(state()) == 0.0


def test_thermo_domain():
    with pytest.raises(WeatherDomainError):
        thermo_tendency(state(p=0.0))
    with pytest.raises(WeatherDomainError):
        PhysicalConstants(cp=0.0)


def test_moisture_by_hand():
    assert moisture_tendency(state(E=3e-5, C=3e-5)) == 0.0
    assert close(moisture_tendency(state(E=2e-5, C=5e-6, Dq=1e-6)), 1.6e-5)
    assert moisture_tendency(state(Dq=0.25)) == 0.25


def test_evaluate_all_composes():
    s = state(omega_vec=(0.0, 0.0, EARTH_OMEGA), V=(10.0, 0.0, 0.0), g=STANDARD_G,
              Q_rad=1004.0, omega_v=0.1, E=2e-5, C=5e-6, Dq=1e-6)
    t = evaluate_all(s)
    assert t.dV_dt == momentum_tendency(s)
    assert t.dT_dt == thermo_tendency(s)
    assert t.dq_dt == moisture_tendency(s)


finite = st.floats(-1e6, 1e6, allow_nan=False)
vec = st.tuples(finite, finite, finite)


@given(vec, vec)
def test_coriolis_perpendicular(om, v):
    c = coriolis(om, v)
    dot = sum(a * b for a, b in zip(c, v))
    scale = 2 * math.sqrt(sum(x * x for x in om)) * sum(x * x for x in v) + 1e-300
    assert abs(dot) <= 1e-12 * scale


@given(vec, vec, vec, vec)
def test_momentum_superposition_in_forcing(f1, f2, d1, d2):
    s = state(V=(1.0, 2.0, 3.0), omega_vec=(0.0, 1e-4, 7e-5))
    base = momentum_tendency(s)
    a = momentum_tendency(state(V=s.V, omega_vec=s.omega_vec, F=f1, Dm=d1))
    b = momentum_tendency(state(V=s.V, omega_vec=s.omega_vec, F=f2, Dm=d2))
    both = momentum_tendency(state(V=s.V, omega_vec=s.omega_vec,
                                   F=tuple(x + y for x, y in zip(f1, f2)),
                                   Dm=tuple(x + y for x, y in zip(d1, d2))))
    for i in range(3):
        expect = a[i] + b[i] - base[i]
        mag = max(abs(a[i]), abs(b[i]), abs(base[i]), 1e-300)
        assert abs(both[i] - expect) <= 1e-12 * mag * 4


def test_batch_format_round_trip():
    rng = random.Random(3)
    states = [WeatherState.from_row(random_row(rng)) for _ in range(20)]
    assert parse_batch(write_batch(states)) == states


def test_batch_errors_name_the_line():
    rng = random.Random(0)
    lines = [" ".join(repr(v) for v in random_row(rng)) for _ in range(9)]
    bad = lines[6].split()
    bad[3] = "abc"
    lines[6] = " ".join(bad)
    with pytest.raises(BatchFormatError) as exc:
        parse_batch("\n".join(lines))
    assert exc.value.line == 7 and "line 7" in str(exc.value)
    with pytest.raises(BatchFormatError, match="expected 26"):
        parse_batch("1 2 3\n")
    zero_rho = ["0"] + lines[0].split()[1:]
    with pytest.raises(BatchFormatError, match="density"):
        parse_batch(" ".join(zero_rho))


def test_output_line_for_zero_forcing():
    row = evaluate_batch([state().to_row()])[0]
    assert format_row(row) == " ".join(["0.0000000000000000e+00"] * 5)
    assert format_row([-0.0]) == "0.0000000000000000e+00"


def test_evaluation_is_deterministic():
    rng = random.Random(11)
    rows = [random_row(rng) for _ in range(200)]
    assert format_batch(evaluate_batch(rows)) == format_batch(evaluate_batch([list(r) for r in rows]))
