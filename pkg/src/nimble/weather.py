"""Pointwise first-order atmospheric tendencies.

Only +, -, * and / are used so results are bit-identical on every node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

Vec3 = tuple[float, float, float]

EARTH_OMEGA = 7.2921159e-5  # rad/s
STANDARD_G = 9.80665  # m/s^2
K_HAT: Vec3 = (0.0, 0.0, 1.0)

# Column order of the batch input format.
COLUMNS = (
    ["rho"]
    + [f"grad_p_{c}" for c in "xyz"]
    + [f"V_{c}" for c in "xyz"]
    + [f"omega_vec_{c}" for c in "xyz"]
    + ["g"]
    + [f"F_{c}" for c in "xyz"]
    + [f"Dm_{c}" for c in "xyz"]
    + ["T", "p", "omega_v", "Q_rad", "Q_con", "DH", "E", "C", "Dq"]
)
N_COLUMNS = len(COLUMNS)


class WeatherDomainError(ValueError):
    pass


class BatchFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class WeatherState:
    rho: float
    grad_p: Vec3
    V: Vec3
    omega_vec: Vec3
    g: float
    F: Vec3
    Dm: Vec3
    T: float
    p: float
    omega_v: float
    Q_rad: float
    Q_con: float
    DH: float
    E: float
    C: float
    Dq: float

    def validate(self) -> None:
        if not self.rho > 0:
            raise WeatherDomainError(f"density must be positive, got {self.rho}")
        if not self.p > 0:
            raise WeatherDomainError(f"pressure must be positive, got {self.p}")
        if not self.T > 0:
            raise WeatherDomainError(f"temperature must be positive, got {self.T}")

    def to_row(self) -> list[float]:
        row: list[float] = []
        for f in fields(self):
            v = getattr(self, f.name)
            row.extend(v if isinstance(v, tuple) else (v,))
        return row

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "WeatherState":
        if len(row) != N_COLUMNS:
            raise ValueError(f"expected {N_COLUMNS} values, got {len(row)}")
        r = [float(v) for v in row]
        return cls(
            rho=r[0],
            grad_p=(r[1], r[2], r[3]),
            V=(r[4], r[5], r[6]),
            omega_vec=(r[7], r[8], r[9]),
            g=r[10],
            F=(r[11], r[12], r[13]),
            Dm=(r[14], r[15], r[16]),
            T=r[17],
            p=r[18],
            omega_v=r[19],
            Q_rad=r[20],
            Q_con=r[21],
            DH=r[22],
            E=r[23],
            C=r[24],
            Dq=r[25],
        )


@dataclass(frozen=True)
class PhysicalConstants:
    cp: float = 1004.0  # J/(kg K)
    R: float = 287.0  # J/(kg K)

    def __post_init__(self):
        if not (self.cp > 0 and self.R > 0):
            raise WeatherDomainError("cp and R must be positive")


@dataclass(frozen=True)
class Tendencies:
    dV_dt: Vec3
    dT_dt: float
    dq_dt: float

    def as_row(self) -> list[float]:
        return [*self.dV_dt, self.dT_dt, self.dq_dt]


def cross(a: Vec3, b: Vec3) -> Vec3:
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def coriolis(omega_vec: Vec3, V: Vec3) -> Vec3:
    """The -2 Omega x V acceleration."""
    c = cross(omega_vec, V)
    return (-2.0 * c[0], -2.0 * c[1], -2.0 * c[2])


def momentum_tendency(s: WeatherState) -> Vec3:
    """-(1/rho) grad p - 2 Omega x V - g k + F + Dm."""
    if not s.rho > 0:
        raise WeatherDomainError(f"density must be positive, got {s.rho}")
    alpha = 1.0 / s.rho
    cor = coriolis(s.omega_vec, s.V)
    return tuple(
        -alpha * s.grad_p[i] + cor[i] - s.g * K_HAT[i] + s.F[i] + s.Dm[i] for i in range(3)
    )


def thermo_tendency(s: WeatherState, c: PhysicalConstants = PhysicalConstants()) -> float:
    if not s.p > 0:
        raise WeatherDomainError(f"pressure must be positive, got {s.p}")
    if not c.cp > 0:
        raise WeatherDomainError(f"cp must be positive, got {c.cp}")
    Q = s.Q_rad + s.Q_con
    return Q / c.cp + (c.R * s.T / s.p) * s.omega_v + s.DH


def moisture_tendency(s: WeatherState) -> float:
    return s.E - s.C + s.Dq


def evaluate_all(s: WeatherState, c: PhysicalConstants = PhysicalConstants()) -> Tendencies:
    return Tendencies(momentum_tendency(s), thermo_tendency(s, c), moisture_tendency(s))


def evaluate_batch(rows: Iterable[Sequence[float]], c: PhysicalConstants = PhysicalConstants()) -> list[list[float]]:
    return [evaluate_all(WeatherState.from_row(r), c).as_row() for r in rows]


def parse_batch(text: str) -> list[WeatherState]:
    """Parse the whitespace-separated batch format; ``#`` lines are comments."""
    states = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != N_COLUMNS:
            raise BatchFormatError(lineno, f"expected {N_COLUMNS} fields, found {len(tokens)}")
        values = []
        for col, tok in zip(COLUMNS, tokens):
            try:
                v = float(tok)
            except ValueError:
                raise BatchFormatError(lineno, f"non-numeric {col} value {tok!r}") from None
            if not math.isfinite(v):
                raise BatchFormatError(lineno, f"non-finite {col} value {tok!r}")
            values.append(v)
        state = WeatherState.from_row(values)
        try:
            state.validate()
        except WeatherDomainError as exc:
            raise BatchFormatError(lineno, str(exc)) from None
        states.append(state)
    return states


def format_row(row: Sequence[float]) -> str:
    # + 0.0 folds -0.0 into 0.0
    return " ".join(f"{v + 0.0:.16e}" for v in row)


def format_batch(rows: Iterable[Sequence[float]]) -> str:
    return "".join(format_row(r) + "\n" for r in rows)


def write_batch(states: Iterable[WeatherState]) -> str:
    header = "# " + " ".join(COLUMNS) + "\n"
    return header + "".join(" ".join(repr(v) for v in s.to_row()) + "\n" for s in states)

