"""Scaled-integer decimal arithmetic and Machin's formula for pi.

A :class:`FixedPoint` stores ``value * 10**digits`` as a Python int, so every
operation here is exact integer arithmetic plus truncation toward zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

DEFAULT_GUARD = 10
MACHIN_ARGS = (5, 239)

# stay under the interpreter's int/str conversion cap (4300 digits by default)
_CHUNK = 4000


def int_to_decimal(n: int) -> str:
    """``str(n)`` for non-negative ints of any size."""
    if n.bit_length() < 3 * _CHUNK:
        return str(n)
    k = (n.bit_length() * 3 // 10) // 2  # about half the decimal digits
    hi, lo = divmod(n, 10**k)
    return int_to_decimal(hi) + int_to_decimal(lo).zfill(k)


def decimal_to_int(text: str) -> int:
    """``int(text)`` for plain digit strings of any length."""
    if not text.isdigit():
        raise ValueError(f"not a digit string: {text[:20]!r}")
    if len(text) <= _CHUNK:
        return int(text)
    k = len(text) // 2
    return decimal_to_int(text[:-k]) * 10**k + decimal_to_int(text[-k:])


class PrecisionMismatch(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class FixedPoint:
    digits: int
    magnitude: int
    negative: bool = False

    def __post_init__(self):
        if self.digits < 0:
            raise ValueError("digits must be non-negative")
        if self.magnitude < 0:
            raise ValueError("magnitude must be non-negative; carry the sign in `negative`")
        if self.magnitude == 0 and self.negative:
            object.__setattr__(self, "negative", False)

    @classmethod
    def from_scaled(cls, scaled: int, digits: int) -> "FixedPoint":
        return cls(digits, abs(scaled), scaled < 0)

    @classmethod
    def from_int(cls, n: int, digits: int) -> "FixedPoint":
        return cls.from_scaled(n * 10**digits, digits)

    @classmethod
    def parse(cls, text: str, digits: int) -> "FixedPoint":
        """Parse a plain decimal literal, truncating extra fraction digits."""
        text = text.strip()
        neg = text.startswith("-")
        text = text.lstrip("+-")
        whole, _, frac = text.partition(".")
        frac = (frac + "0" * digits)[:digits]
        mag = decimal_to_int(whole or "0") * 10**digits + decimal_to_int(frac or "0")
        return cls(digits, mag, neg)

    @property
    def scaled(self) -> int:
        return -self.magnitude if self.negative else self.magnitude

    def __str__(self) -> str:
        whole, frac = divmod(self.magnitude, 10**self.digits)
        sign = "-" if self.negative else ""
        if self.digits == 0:
            return f"{sign}{int_to_decimal(whole)}"
        return f"{sign}{int_to_decimal(whole)}.{int_to_decimal(frac).zfill(self.digits)}"

    def to_json(self) -> dict:
        # hex has no conversion cap and is cheaper than decimal for big magnitudes
        return {"digits": self.digits, "magnitude": format(self.magnitude, "x"), "negative": self.negative}

    @classmethod
    def from_json(cls, obj: dict) -> "FixedPoint":
        return cls(int(obj["digits"]), int(obj["magnitude"], 16), bool(obj["negative"]))

    def __add__(self, other: "FixedPoint") -> "FixedPoint":
        return fp_add(self, other)

    def __neg__(self) -> "FixedPoint":
        return FixedPoint(self.digits, self.magnitude, not self.negative)

    def __sub__(self, other: "FixedPoint") -> "FixedPoint":
        return fp_add(self, -other)


def fp_add(a: FixedPoint, b: FixedPoint) -> FixedPoint:
    if a.digits != b.digits:
        raise PrecisionMismatch(f"cannot combine D={a.digits} with D={b.digits}")
    return FixedPoint.from_scaled(a.scaled + b.scaled, a.digits)


def fp_sum(values: Iterable[FixedPoint], digits: int) -> FixedPoint:
    total = FixedPoint(digits, 0)
    for v in values:
        total = fp_add(total, v)
    return total


def fp_div_small(a: FixedPoint, n: int) -> FixedPoint:
    """Divide by a positive integer, truncating the magnitude toward zero."""
    if n == 0:
        raise ZeroDivisionError("fp_div_small by zero")
    if n < 0:
        raise ValueError("divisor must be positive")
    return FixedPoint(a.digits, a.magnitude // n, a.negative)


def fp_mul_small(a: FixedPoint, n: int) -> FixedPoint:
    if n < 0:
        raise ValueError("multiplier must be non-negative")
    return FixedPoint(a.digits, a.magnitude * n, a.negative)


@dataclass(frozen=True)
class TermRange:
    """Half-open range ``[start, end)`` of arctan(1/x) Maclaurin term indices."""

    start: int
    end: int
    x: int

    def __post_init__(self):
        if self.start < 0 or self.start >= self.end:
            raise ValueError(f"bad term range [{self.start}, {self.end})")
        if self.x < 2:
            raise ValueError(f"series argument denominator must be >= 2, got {self.x}")

    def __len__(self):
        return self.end - self.start


def arctan_reciprocal(x: int, digits: int, rng: TermRange) -> FixedPoint:
    """Sum of terms ``(-1)**k / ((2k+1) x**(2k+1))`` for k in ``rng``, at ``digits``.

    Term k is ``floor(floor(10**D / x**(2k+1)) / (2k+1))``. Because nested
    floor divisions by positive integers compose exactly, the leading power can
    be obtained with a single division no matter where the range starts, and
    each later power by dividing by ``x**2``. Partial sums over any tiling of
    ``[0, N)`` therefore add up to the full sum bit-for-bit.
    """
    if x < 2:
        raise ValueError(f"arctan(1/x) series requires x >= 2, got {x}")
    if rng.x != x:
        raise ValueError(f"term range is for x={rng.x}, not x={x}")
    power = FixedPoint(digits, 10**digits // x ** (2 * rng.start + 1))
    x2 = x * x
    total = 0
    for k in range(rng.start, rng.end):
        term = fp_div_small(power, 2 * k + 1).magnitude
        total += -term if k & 1 else term
        power = fp_div_small(power, x2)
    return FixedPoint.from_scaled(total, digits)


def terms_needed(x: int, digits: int) -> int:
    """Number of arctan(1/x) terms whose first omitted term is below 10**-digits."""
    if x < 2 or digits < 1:
        raise ValueError("terms_needed requires x >= 2 and digits >= 1")
    return math.ceil(digits / (2 * math.log10(x))) + 1


def split_range(x: int, n_terms: int, parts: int) -> list[TermRange]:
    """Tile ``[0, n_terms)`` into at most ``parts`` contiguous, near-equal ranges."""
    parts = max(1, min(parts, n_terms))
    bounds = [n_terms * i // parts for i in range(parts + 1)]
    return [TermRange(a, b, x) for a, b in zip(bounds, bounds[1:])]


def machin_partitions(digits: int, guard: int = DEFAULT_GUARD, parts: int = 1) -> list[TermRange]:
    work = digits + guard
    out: list[TermRange] = []
    for x in MACHIN_ARGS:
        out.extend(split_range(x, terms_needed(x, work), parts))
    return out


def check_tiling(partitions: Sequence[TermRange], x: int, n_terms: int) -> None:
    ranges = sorted((r for r in partitions if r.x == x), key=lambda r: r.start)
    cursor = 0
    for r in ranges:
        if r.start < cursor:
            raise PartitionError(f"x={x}: range [{r.start}, {r.end}) overlaps term {cursor - 1}")
        if r.start > cursor:
            raise PartitionError(f"x={x}: terms [{cursor}, {r.start}) are not covered")
        cursor = r.end
    if cursor != n_terms:
        raise PartitionError(f"x={x}: ranges end at {cursor}, expected {n_terms}")


def combine_machin(digits: int, guard: int, partials: dict[int, list[FixedPoint]]) -> str:
    """Reduce per-series partial sums into the truncated digit string of pi."""
    work = digits + guard
    a5 = fp_sum(partials.get(5, []), work)
    a239 = fp_sum(partials.get(239, []), work)
    pi = fp_add(fp_mul_small(a5, 16), -fp_mul_small(a239, 4))
    if pi.negative:
        raise ArithmeticError("pi came out negative; partial sums are incomplete")
    truncated = FixedPoint(digits, pi.magnitude // 10**guard)
    return str(truncated)


def machin_pi(digits: int, guard: int = DEFAULT_GUARD, partitions: Sequence[TermRange] | None = None) -> str:
    """Return ``"3."`` followed by ``digits`` truncated digits of pi."""
    if digits < 1:
        raise ValueError("digits must be >= 1")
    work = digits + guard
    if partitions is None:
        partitions = machin_partitions(digits, guard)
    for x in MACHIN_ARGS:
        check_tiling(partitions, x, terms_needed(x, work))
    stray = [r for r in partitions if r.x not in MACHIN_ARGS]
    if stray:
        raise PartitionError(f"ranges for unexpected series arguments: {stray}")
    partials: dict[int, list[FixedPoint]] = {5: [], 239: []}
    for r in partitions:
        partials[r.x].append(arctan_reciprocal(r.x, work, r))
    return combine_machin(digits, guard, partials)
