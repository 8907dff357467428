"""Independent reference computations used by the tests.

Nothing here imports the package under test.
"""
from __future__ import annotations

import decimal
import random

import mpmath

# first 120 decimals of pi, from published tables; cross-checked against mpmath below
PI_120 = (
    "3.141592653589793238462643383279502884197169399375105820974944592307816406286"
    "208998628034825342117067982148086513282306647"
)


def mpmath_pi(digits: int) -> str:
    """Truncated (not rounded) ``digits`` decimals of pi via mpmath."""
    with mpmath.workdps(digits + 20):
        text = mpmath.nstr(mpmath.pi, digits + 15, strip_zeros=False)
    return text[: digits + 2]


def decimal_arctan_inv(x: int, prec: int) -> decimal.Decimal:
    """arctan(1/x) by exhaustive Maclaurin summation in Decimal at ``prec`` digits."""
    ctx = decimal.Context(prec=prec + 5)
    eps = decimal.Decimal(10) ** -(prec + 3)
    inv_x = ctx.divide(decimal.Decimal(1), decimal.Decimal(x))
    inv_x2 = ctx.multiply(inv_x, inv_x)
    power = inv_x
    total = decimal.Decimal(0)
    k = 0
    while True:
        term = ctx.divide(power, decimal.Decimal(2 * k + 1))
        if term < eps:
            return total
        total = ctx.subtract(total, term) if k % 2 else ctx.add(total, term)
        power = ctx.multiply(power, inv_x2)
        k += 1


def decimal_pi(prec: int) -> decimal.Decimal:
    ctx = decimal.Context(prec=prec + 5)
    a = decimal_arctan_inv(5, prec)
    b = decimal_arctan_inv(239, prec)
    return ctx.subtract(ctx.multiply(16, a), ctx.multiply(4, b))


def random_row(rng: random.Random) -> list[float]:
    """One physically plausible weather state in batch column order."""
    def u(lo, hi):
        return rng.uniform(lo, hi)

    return [
        u(0.3, 1.4),                                   # rho
        u(-0.05, 0.05), u(-0.05, 0.05), u(-12.0, 12.0),  # grad_p
        u(-40, 40), u(-40, 40), u(-1, 1),              # V
        0.0, u(-1e-4, 1e-4), u(-1e-4, 1e-4),           # omega_vec
        u(9.78, 9.83),                                 # g
        u(-1e-3, 1e-3), u(-1e-3, 1e-3), u(-1e-3, 1e-3),  # F
        u(-1e-4, 1e-4), u(-1e-4, 1e-4), u(-1e-4, 1e-4),  # Dm
        u(200, 310), u(2e4, 1.05e5), u(-2, 2),          # T, p, omega_v
        u(-500, 500), u(0, 800), u(-1e-3, 1e-3),       # Q_rad, Q_con, DH
        u(0, 5e-5), u(0, 5e-5), u(-1e-6, 1e-6),        # E, C, Dq
    ]
