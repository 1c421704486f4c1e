"""Mann-Kendall monotonic trend test with a dead band for small volume changes.

Differences within ``±deadband`` (inclusive) count as ties. The variance uses
the untied formula ``n(n-1)(2n+5)/18`` and the standardized statistic applies
the usual ±1 continuity correction.

Confidence is reported the way a printed standard normal table is read:
``|z|`` is rounded up to two decimals before looking up ``Φ``. The exact
``100·Φ(|z|)`` is kept alongside as ``confidence_exact_pct``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .errors import ParameterError, SeriesTooShortError

MIN_VISITS = 3
TREND_HEADER = ("patient_id", "tissue", "n_visits", "S", "var_s", "z_vol", "confidence_pct", "direction")


def mk_sign(diff: float, deadband: float = 1.0) -> int:
    if deadband < 0:
        raise ParameterError("dead band must be >= 0")
    if diff > deadband:
        return 1
    if diff < -deadband:
        return -1
    return 0


def _check_length(n: int) -> None:
    if n < MIN_VISITS:
        raise SeriesTooShortError(f"trend needs at least three visits, got {n}")


def mk_statistic(series, deadband: float = 1.0) -> int:
    x = [float(v) for v in series]
    n = len(x)
    _check_length(n)
    return sum(mk_sign(x[j] - x[k], deadband) for k in range(n - 1) for j in range(k + 1, n))


def mk_variance(n: int) -> float:
    _check_length(n)
    return n * (n - 1) * (2 * n + 5) / 18.0


def normal_cdf(z: float) -> float:
    """Standard normal CDF, accurate to double precision via ``erfc``."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def table_abscissa(z_abs: float) -> float:
    """``|z|`` rounded up to the next 0.01, as read from a two-decimal table."""
    # strip representation noise so 1.7 does not become 1.71
    return math.ceil(round(z_abs * 100.0, 9)) / 100.0


_BELOW_100 = math.nextafter(100.0, 0.0)


def z_and_confidence(S: int, var_s: float) -> tuple[float, float, str]:
    """``(z_vol, confidence_pct, direction)``."""
    z, _, conf, direction = _z_conf(S, var_s)
    return z, conf, direction


def _z_conf(S: int, var_s: float) -> tuple[float, float, float, str]:
    if not var_s > 0:
        raise ParameterError("Var(S) must be positive")
    sd = math.sqrt(var_s)
    if S > 0:
        z = (S - 1) / sd
    elif S < 0:
        z = (S + 1) / sd
    else:
        z = 0.0
    exact = min(100.0 * normal_cdf(abs(z)), _BELOW_100)
    table = min(100.0 * normal_cdf(table_abscissa(abs(z))), _BELOW_100)
    direction = "increasing" if z > 0 else "decreasing" if z < 0 else "no-trend"
    return z, exact, table, direction


@dataclass(frozen=True)
class TrendResult:
    S: int
    var_s: float
    z_vol: float
    confidence_pct: float
    direction: str
    n: int
    confidence_exact_pct: float

    def __post_init__(self):
        if abs(self.S) > self.n * (self.n - 1) // 2:
            raise ParameterError("|S| exceeds the number of pairs")

    def to_json(self) -> dict:
        return {"S": self.S, "var_s": self.var_s, "z_vol": self.z_vol, "confidence_pct": self.confidence_pct,
                "confidence_exact_pct": self.confidence_exact_pct, "direction": self.direction,
                "n_visits": self.n}


def analyze_trend(series, deadband: float = 1.0) -> TrendResult:
    x = [float(v) for v in series]
    S = mk_statistic(x, deadband)
    var_s = mk_variance(len(x))
    z, exact, table, direction = _z_conf(S, var_s)
    return TrendResult(S, var_s, z, table, direction, len(x), exact)


def trend_rows(results) -> list[tuple]:
    """CSV rows from ``(patient_id, tissue, TrendResult)`` triples."""
    return [(pid, tissue, r.n, r.S, f"{r.var_s:.4f}", f"{r.z_vol:.4f}", f"{r.confidence_pct:.2f}", r.direction)
            for pid, tissue, r in results]


def trend_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TREND_HEADER)
    writer.writerows(trend_rows(results))
    return buf.getvalue()
