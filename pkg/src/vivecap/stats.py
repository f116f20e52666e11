"""Paired right-tailed t-test and supporting special functions.

The Student-t survival function is computed from first principles via a
continued-fraction evaluation of the regularized incomplete beta
function (Lentz's method, as in the classic numerical recipes), so no
stats library is needed at runtime.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass


class DomainError(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class CountMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PairedSamples:
    before: tuple[float, ...]
    after: tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        if len(self.before) != len(self.after):
            raise LengthMismatch(
                f"before has {len(self.before)} values, after has {len(self.after)}"
            )
        if len(self.before) < 2:
            raise ValueError("need at least 2 pairs")


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value_one_sided: float
    mean_difference: float
    n: int


@dataclass(frozen=True)
class CorrectionPolicy:
    alpha: float = 0.05
    m_tests: int = 1

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")
        if self.m_tests < 1:
            raise ValueError("m_tests must be positive")


_CF_MAX_ITER = 300
_CF_EPS = 1e-15
_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified
    Lentz iteration)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        # even step
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        # odd step
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    return h


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b), switching to the symmetric form when the continued
    fraction converges faster there."""
    if a <= 0 or b <= 0:
        raise DomainError("a and b must be positive")
    if not (0.0 <= x <= 1.0):
        raise DomainError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """One-sided upper tail P(T_df > t)."""
    if df < 1:
        raise DomainError("df must be >= 1")
    if t < 0.0:
        return 1.0 - student_t_sf(-t, df)
    x = df / (df + t * t)
    return 0.5 * regularized_incomplete_beta(x, df / 2.0, 0.5)


def paired_t_test(s: PairedSamples) -> TTestResult:
    n = len(s.before)
    diffs = [a - b for b, a in zip(s.before, s.after)]
    mean_d = sum(diffs) / n
    ss = sum((d - mean_d) ** 2 for d in diffs)
    if ss == 0.0:
        raise ZeroVariance("all paired differences are equal")
    sd = math.sqrt(ss / (n - 1))
    t = mean_d / (sd / math.sqrt(n))
    return TTestResult(
        t_statistic=t,
        degrees_of_freedom=n - 1,
        p_value_one_sided=student_t_sf(t, n - 1),
        mean_difference=mean_d,
        n=n,
    )


def bonferroni_threshold(policy: CorrectionPolicy) -> float:
    return policy.alpha / policy.m_tests


@dataclass(frozen=True)
class SignificanceRow:
    metric: str
    t_statistic: float
    degrees_of_freedom: int
    p_value_one_sided: float
    threshold: float
    significant: bool
    n: int


def significance_report(
    results: dict[str, TTestResult], policy: CorrectionPolicy
) -> list[SignificanceRow]:
    """Thresholded verdicts per metric; significance is strict (p < alpha/m)."""
    if policy.m_tests != len(results):
        raise CountMismatch(
            f"policy covers {policy.m_tests} tests but {len(results)} results given"
        )
    threshold = bonferroni_threshold(policy)
    rows = []
    for metric, res in results.items():
        rows.append(
            SignificanceRow(
                metric=metric,
                t_statistic=res.t_statistic,
                degrees_of_freedom=res.degrees_of_freedom,
                p_value_one_sided=res.p_value_one_sided,
                threshold=threshold,
                significant=res.p_value_one_sided < threshold,
                n=res.n,
            )
        )
    return rows


def report_json(rows: list[SignificanceRow]) -> str:
    return json.dumps(
        [
            {
                "metric": r.metric,
                "t": r.t_statistic,
                "df": r.degrees_of_freedom,
                "p_one_sided": r.p_value_one_sided,
                "threshold": r.threshold,
                "significant": r.significant,
                "n": r.n,
            }
            for r in rows
        ],
        indent=2,
    )


def report_csv(rows: list[SignificanceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "t", "df", "p_one_sided", "threshold", "significant", "n"])
    for r in rows:
        writer.writerow([
            r.metric, f"{r.t_statistic:.6g}", r.degrees_of_freedom,
            f"{r.p_value_one_sided:.6g}", f"{r.threshold:.6g}",
            str(r.significant).lower(), r.n,
        ])
    return buf.getvalue()
