import decimal
import math
import random

import pytest
from hypothesis import given, strategies as st

from nimble.precision import (
    FixedPoint, PartitionError, PrecisionMismatch, TermRange, arctan_reciprocal, check_tiling,
    combine_machin, decimal_to_int, fp_add, fp_div_small, fp_mul_small, int_to_decimal, machin_partitions,
    machin_pi, split_range, terms_needed,
)

from oracles import PI_120, decimal_arctan_inv, mpmath_pi


def fp(text, d=6):
    return FixedPoint.parse(text, d)


# -- fixed point -----------------------------------------------------------

def test_add_identity_and_inverse():
    x = fp("0.123456")
    assert fp_add(FixedPoint(6, 0), x) == x
    z = fp("1.5") + fp("-1.5")
    assert z.magnitude == 0 and not z.negative
    assert str(z) == "0.000000"


def test_add_scaled_integers():
    assert fp("0.333333") + fp("0.000001") == fp("0.333334")


def test_mismatched_digits():
    with pytest.raises(PrecisionMismatch):
        fp_add(fp("1", 6), fp("1", 7))


def test_division_truncates():
    assert fp_div_small(fp("1.000000"), 3) == fp("0.333333")
    assert fp_div_small(fp("2.000000"), 7) == fp("0.285714")
    assert fp_div_small(fp("2.5"), 1) == fp("2.5")
    with pytest.raises(ZeroDivisionError):
        fp_div_small(fp("1"), 0)


def test_negative_zero_is_canonical():
    assert FixedPoint(4, 0, True) == FixedPoint(4, 0, False)
    assert fp_div_small(fp("-0.000001"), 2) == FixedPoint(6, 0)


def test_parse_and_str():
    assert str(fp("-12.5")) == "-12.500000"
    assert str(FixedPoint.parse("3.14159", 3)) == "3.141"
    assert str(FixedPoint.from_int(7, 0)) == "7"


scaled = st.integers(-10**30, 10**30)


@given(scaled, scaled, scaled)
def test_add_associative_commutative(a, b, c):
    A, B, C = (FixedPoint.from_scaled(v, 12) for v in (a, b, c))
    assert A + B == B + A
    assert (A + B) + C == A + (B + C)


@given(scaled, st.integers(1, 10**6))
def test_div_matches_integer_floor(a, n):
    A = FixedPoint.from_scaled(a, 9)
    q = fp_div_small(A, n)
    assert q.magnitude == abs(a) // n
    assert fp_mul_small(q, n).magnitude <= abs(a)


@given(scaled)
def test_json_round_trip(a):
    A = FixedPoint.from_scaled(a, 20)
    assert FixedPoint.from_json(A.to_json()) == A
    assert FixedPoint.parse(str(A), 20) == A


def test_big_integer_text_conversion():
    n = random.Random(1).getrandbits(60_000)
    text = int_to_decimal(n)
    assert decimal_to_int(text) == n
    with decimal.localcontext() as ctx:
        ctx.prec = 20_000
        assert text == str(decimal.Decimal(n))


# -- series ----------------------------------------------------------------

def test_first_terms():
    assert str(arctan_reciprocal(5, 12, TermRange(0, 1, 5))) == "0.200000000000"
    # 10**12 // 125 // 3 = 2666666666
    assert str(arctan_reciprocal(5, 12, TermRange(1, 2, 5))) == "-0.002666666666"


def test_domain_error():
    with pytest.raises(ValueError):
        arctan_reciprocal(1, 10, TermRange(0, 1, 2))
    with pytest.raises(ValueError):
        TermRange(0, 1, 1)
    with pytest.raises(ValueError):
        TermRange(3, 3, 5)


def test_arctan_239_matches_oracle():
    d = 30
    n = terms_needed(239, d + 10)
    got = arctan_reciprocal(239, d + 10, TermRange(0, n, 239))
    ref = decimal_arctan_inv(239, d + 30)
    assert abs(decimal.Decimal(str(got)) - ref) < decimal.Decimal(10) ** -d


def test_terms_needed_values():
    # ceil(D / (2 log10 x)) + 1, frozen from a direct evaluation
    assert terms_needed(5, 10**6) == 715_340
    assert terms_needed(239, 10**6) == 210_227
    assert terms_needed(5, 120) == 87


@pytest.mark.parametrize("x,d", [(5, 120), (5, 40), (239, 120), (239, 33)])
def test_first_omitted_term_is_below_resolution(x, d):
    n = terms_needed(x, d)
    # term n is 1 / ((2n+1) x**(2n+1)); compare 10**d against its denominator
    assert (2 * n + 1) * x ** (2 * n + 1) > 10**d
    # the closed form ignores the 1/(2k+1) factor, so it may overshoot the
    # minimal count by about log(2n+1)/log(x^2) terms plus the +1
    m = next(k for k in range(n + 1) if (2 * k + 1) * x ** (2 * k + 1) > 10**d)
    slack = 1 + math.ceil(math.log10(2 * n + 1) / (2 * math.log10(x)))
    assert 0 <= n - m <= slack


def test_split_range_tiles():
    for parts in range(1, 17):
        r = split_range(5, 87, parts)
        check_tiling(r, 5, 87)
        assert len(r) == parts


def test_tiling_errors():
    with pytest.raises(PartitionError, match="overlaps"):
        check_tiling([TermRange(0, 5, 5), TermRange(4, 10, 5)], 5, 10)
    with pytest.raises(PartitionError, match="not covered"):
        check_tiling([TermRange(0, 5, 5), TermRange(6, 10, 5)], 5, 10)
    with pytest.raises(PartitionError, match="expected"):
        check_tiling([TermRange(0, 5, 5)], 5, 10)
    with pytest.raises(PartitionError):
        machin_pi(20, partitions=[TermRange(0, 3, 5)])


# -- pi --------------------------------------------------------------------

def test_pi_short():
    assert machin_pi(10) == "3.1415926535"
    assert machin_pi(1) == "3.1"


def test_pi_120_reference():
    assert machin_pi(120) == PI_120
    assert PI_120.endswith("82306647")


def test_pi_matches_mpmath_at_2000():
    assert machin_pi(2000) == mpmath_pi(2000)


@given(st.integers(1, 16), st.integers(1, 16))
def test_partition_invariance(p5, p239):
    d, guard = 120, 10
    work = d + guard
    ranges = split_range(5, terms_needed(5, work), p5) + split_range(239, terms_needed(239, work), p239)
    assert machin_pi(d, partitions=ranges) == PI_120


@given(st.lists(st.integers(1, 90), max_size=8, unique=True))
def test_irregular_tilings_agree(cuts):
    d, work = 60, 70
    n5 = terms_needed(5, work)
    bounds = sorted({0, n5, *(c for c in cuts if c < n5)})
    ranges = [TermRange(a, b, 5) for a, b in zip(bounds, bounds[1:])]
    ranges += split_range(239, terms_needed(239, work), 1)
    assert machin_pi(d, partitions=ranges) == PI_120[: d + 2]


def test_combine_is_order_independent():
    work = 130
    ranges = machin_partitions(120, parts=5)
    partials = {5: [], 239: []}
    for r in ranges:
        partials[r.x].append(arctan_reciprocal(r.x, work, r))
    for x in partials:
        partials[x].reverse()
    assert combine_machin(120, 10, partials) == PI_120


def test_prefix_property():
    long = machin_pi(300)
    for d in (1, 17, 50, 120, 299):
        assert long.startswith(machin_pi(d))
