import csv
import io
import math
from itertools import combinations

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from longmri.errors import ParameterError, SeriesTooShortError
from longmri.trend import (TREND_HEADER, analyze_trend, mk_sign, mk_statistic, mk_variance, normal_cdf,
                           table_abscissa, trend_csv, z_and_confidence)

TABLE1_GM = [554.21, 536.83, 526.15, 497.34]


def series_cdf(z, terms=40):
    """Phi(z) from the all-positive power series 1/2 + phi(z) * sum z^(2n+1) / (2n+1)!!."""
    term, total = z, z
    for n in range(1, terms):
        term *= z * z / (2 * n + 1)
        total += term
    return 0.5 + math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * total


def continued_fraction_tail(z, terms=40):
    """Upper tail 1 - Phi(z) for z > 0 via Laplace's continued fraction."""
    frac = 0.0
    for k in range(terms, 0, -1):
        frac = k / (z + frac)
    return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) / (z + frac)


def cdf_oracle(z):
    if abs(z) <= 3:
        return series_cdf(z, terms=60)
    tail = continued_fraction_tail(abs(z))
    return 1 - tail if z > 0 else tail


def brute_force_s(x, band=1.0):
    return sum(int(np.sign(b - a)) if abs(b - a) > band else 0 for a, b in combinations(x, 2))


# --- sign / statistic / variance --------------------------------------------------------------

@pytest.mark.parametrize("diff,expected", [(2.0, 1), (1.0, 0), (-1.0, 0), (-1.5, -1), (0.0, 0),
                                           (1.0000001, 1)])
def test_mk_sign(diff, expected):
    assert mk_sign(diff) == expected


def test_mk_sign_negative_band():
    with pytest.raises(ParameterError):
        mk_sign(1.0, -0.5)


def test_statistic_examples():
    assert mk_statistic(TABLE1_GM) == -6
    assert mk_statistic([10.0, 12.0, 14.5]) == 3
    assert mk_statistic([5.0] * 6) == 0


def test_too_short():
    with pytest.raises(SeriesTooShortError, match="at least three"):
        mk_statistic([1.0, 2.0])
    with pytest.raises(SeriesTooShortError):
        mk_variance(2)


def test_variance_values():
    assert mk_variance(4) == pytest.approx(8.667, abs=1e-3)
    assert mk_variance(3) == pytest.approx(3.667, abs=1e-3)
    assert mk_variance(10) == 10 * 9 * 25 / 18 == 125.0


# --- z and confidence -------------------------------------------------------------------------

def test_four_visit_reproduction():
    z, conf, direction = z_and_confidence(-6, mk_variance(4))
    assert z == pytest.approx(-1.698, abs=1e-3)
    assert conf == pytest.approx(95.54, abs=0.01)
    assert direction == "decreasing"


def test_three_visit_reproduction():
    z, conf, direction = z_and_confidence(-3, mk_variance(3))
    assert z == pytest.approx(-1.044, abs=5e-3)
    assert conf == pytest.approx(85.31, abs=0.01)
    assert direction == "decreasing"


def test_unit_statistic_is_no_trend():
    assert z_and_confidence(1, mk_variance(3)) == (0.0, 50.0, "no-trend")
    assert z_and_confidence(-1, mk_variance(3)) == (0.0, 50.0, "no-trend")


def test_zero_statistic():
    assert z_and_confidence(0, 8.0) == (0.0, 50.0, "no-trend")
    with pytest.raises(ParameterError):
        z_and_confidence(1, 0.0)


def test_table_abscissa():
    assert table_abscissa(1.6984155) == 1.70
    assert table_abscissa(1.0444659) == 1.05
    assert table_abscissa(1.7) == 1.7
    assert table_abscissa(0.0) == 0.0


def test_increasing_csf_like_series():
    r = analyze_trend([300.0, 310.0, 322.5, 335.0])
    assert (r.S, r.direction) == (6, "increasing")
    assert r.z_vol == pytest.approx(1.698, abs=1e-3)
    assert r.confidence_pct == pytest.approx(95.54, abs=0.01)


def test_dead_band_series():
    r = analyze_trend([100.0, 100.5, 99.8])
    assert r.S == 0 and r.direction == "no-trend" and r.confidence_pct == 50.0


def test_exact_confidence_kept():
    r = analyze_trend(TABLE1_GM)
    assert r.confidence_exact_pct == pytest.approx(100 * cdf_oracle(1.6984155512168937), abs=1e-9)


# --- normal CDF -------------------------------------------------------------------------------

@given(st.floats(-6, 6))
def test_normal_cdf_against_series_oracle(z):
    assert normal_cdf(z) == pytest.approx(cdf_oracle(z), abs=1e-7)


def test_oracles_agree_with_high_precision():
    mpmath.mp.dps = 40
    for z in np.linspace(-6, 6, 49):
        exact = float(mpmath.ncdf(z))
        assert cdf_oracle(z) == pytest.approx(exact, abs=1e-12)
        assert normal_cdf(z) == pytest.approx(exact, abs=1e-15)


# --- properties -------------------------------------------------------------------------------

volumes = st.lists(st.floats(100, 900, allow_nan=False), min_size=3, max_size=12)


@given(volumes)
def test_statistic_matches_brute_force(x):
    assert mk_statistic(x) == brute_force_s(x)


@given(volumes)
def test_reversal_negates(x):
    a, b = analyze_trend(x), analyze_trend(x[::-1])
    assert b.S == -a.S and b.z_vol == -a.z_vol
    if abs(a.S) > 1:
        assert {a.direction, b.direction} == {"increasing", "decreasing"}


@given(volumes)
def test_result_invariants(x):
    r = analyze_trend(x)
    n = len(x)
    assert abs(r.S) <= n * (n - 1) // 2
    # the continuity correction maps S = ±1 onto z = 0
    assert np.sign(r.z_vol) == (np.sign(r.S) if abs(r.S) > 1 else 0)
    assert 50 <= r.confidence_pct < 100
    assert (r.confidence_pct == 50) == (abs(r.S) <= 1)
    assert (r.direction == "no-trend") == (abs(r.S) <= 1)


@given(volumes)
def test_max_statistic_iff_strictly_monotone(x):
    n = len(x)
    monotone = all(b - a > 1.0 for a, b in combinations(x, 2)) or all(a - b > 1.0 for a, b in combinations(x, 2))
    assert (abs(mk_statistic(x)) == n * (n - 1) // 2) == monotone


@given(volumes, st.integers(-500, 500))
def test_offset_invariance(x, c):
    # integer offsets keep the float differences exact enough to not cross the band edge
    y = [v + c for v in x]
    assume(all(abs(abs(b - a) - 1.0) > 1e-9 for a, b in combinations(x, 2)))
    a, b = analyze_trend(x), analyze_trend(y)
    assert (a.S, a.z_vol, a.confidence_pct) == (b.S, b.z_vol, b.confidence_pct)


def test_large_z_confidence_below_100():
    r = analyze_trend(np.arange(200) * 10.0)
    assert r.confidence_pct < 100


def test_trend_csv_schema():
    text = trend_csv([("P1", "gm", analyze_trend(TABLE1_GM))])
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == TREND_HEADER
    assert rows[1] == ["P1", "gm", "4", "-6", "8.6667", "-1.6984", "95.54", "decreasing"]
