"""Latency aggregation and the statistics used to validate runs.

Percentiles use the nearest-rank definition. The Student-t distribution is
evaluated through the regularized incomplete beta function so that p-values
and confidence multipliers need no external statistics package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

NS_PER_MS = 1_000_000


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class LatencySample:
    sojourn_ns: int
    queue_ns: int
    service_ns: int
    completion_offset_s: float
    client_id: int
    server_id: int
    send_offset_s: float = 0.0
    planned_offset_s: float | None = None  # planned send instant; late sends count against it


@dataclass(frozen=True)
class LatencySummary:
    n: int
    mean_ms: float
    p95_ms: float
    p99_ms: float
    min_ms: float
    max_ms: float

    def metric(self, name: str) -> float:
        return {"mean": self.mean_ms, "p95": self.p95_ms, "p99": self.p99_ms,
                "min": self.min_ms, "max": self.max_ms}[name]


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    reject_at_0_05: bool

    def cell(self) -> str:
        """``T / P`` rendering used in comparison tables."""
        return f"{self.t_statistic:.2f} / {self.p_value:.2f}"


# --- order statistics ------------------------------------------------------

def percentile(samples: Sequence[float], q: float):
    if not samples:
        raise StatsError("percentile of an empty sample")
    if not 0 < q <= 1:
        raise StatsError(f"q must be in (0, 1], got {q}")
    ordered = sorted(samples)
    # rounding absorbs binary error in q (0.95 * 100 == 95.00000000000001)
    rank = max(1, math.ceil(round(q * len(ordered), 9)))
    return ordered[rank - 1]


def summarize(samples: Iterable[LatencySample], window: tuple[float, float] | None = None) -> LatencySummary | None:
    """Summary of the samples completing inside ``window`` = [start, end).

    Returns None for a window holding no samples so callers can render a gap.
    """
    if window is None:
        sojourns = [s.sojourn_ns for s in samples]
    else:
        lo, hi = window
        sojourns = [s.sojourn_ns for s in samples if lo <= s.completion_offset_s < hi]
    return summarize_durations(sojourns)


def summarize_durations(durations_ns: Sequence[int]) -> LatencySummary | None:
    if not durations_ns:
        return None
    ordered = sorted(durations_ns)
    n = len(ordered)
    ms = [d / NS_PER_MS for d in (ordered[0], ordered[-1])]
    return LatencySummary(
        n=n,
        mean_ms=math.fsum(ordered) / n / NS_PER_MS,
        p95_ms=percentile(ordered, 0.95) / NS_PER_MS,
        p99_ms=percentile(ordered, 0.99) / NS_PER_MS,
        min_ms=ms[0],
        max_ms=ms[1],
    )


def windows(samples: Sequence[LatencySample], window_s: float, start_s: float = 0.0,
            end_s: float | None = None) -> list[tuple[float, float, LatencySummary | None]]:
    """Consecutive fixed-width windows keyed by completion time."""
    if window_s <= 0:
        raise StatsError("window_s must be > 0")
    if end_s is None:
        end_s = max((s.completion_offset_s for s in samples), default=start_s) + 1e-9
    buckets: dict[int, list[int]] = {}
    for s in samples:
        if start_s <= s.completion_offset_s < end_s:
            buckets.setdefault(int((s.completion_offset_s - start_s) // window_s), []).append(s.sojourn_ns)
    count = max(1, math.ceil((end_s - start_s) / window_s - 1e-9))
    return [
        (start_s + i * window_s, start_s + (i + 1) * window_s, summarize_durations(buckets.get(i, [])))
        for i in range(count)
    ]


# --- Student t via the regularized incomplete beta -------------------------

_FPMIN = 1e-300
_EPS = 1e-16


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise StatsError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise StatsError("degrees of freedom must be > 0")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    # I_{v/(v+t^2)}(v/2, 1/2); the complementary argument keeps precision for small |t|
    if t2 < dof:
        return 1.0 - betainc(0.5, dof / 2.0, t2 / (dof + t2))
    return betainc(dof / 2.0, 0.5, dof / (dof + t2))


def t_cdf(t: float, dof: float) -> float:
    tail = t_sf_two_sided(t, dof) / 2.0
    return 1.0 - tail if t > 0 else tail


def t_ppf(p: float, dof: float) -> float:
    """Quantile of Student's t, by bisection on :func:`t_cdf`."""
    if not 0.0 < p < 1.0:
        raise StatsError("p must be in (0, 1)")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_ppf(1.0 - p, dof)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, dof) < p:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# --- tests and intervals ---------------------------------------------------

def _mean_var(x: Sequence[float]) -> tuple[float, float]:
    n = len(x)
    m = math.fsum(x) / n
    return m, math.fsum((v - m) ** 2 for v in x) / (n - 1)


def welch_t(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    if len(x) < 2 or len(y) < 2:
        raise StatsError("welch_t needs at least two values per sample")
    mx, vx = _mean_var(x)
    my, vy = _mean_var(y)
    ex, ey = vx / len(x), vy / len(y)
    se2 = ex + ey
    if se2 == 0.0:
        if mx == my:
            return TTestResult(0.0, float(len(x) + len(y) - 2), 1.0, False)
        raise StatsError("both samples have zero variance but different means")
    t = (mx - my) / math.sqrt(se2)
    # Welch-Satterthwaite, scaled by the larger term so tiny variances do not underflow
    big = max(ex, ey)
    rx, ry = ex / big, ey / big
    dof = (rx + ry) ** 2 / (rx * rx / (len(x) - 1) + ry * ry / (len(y) - 1))
    p = min(1.0, max(0.0, t_sf_two_sided(t, dof)))
    return TTestResult(t, dof, p, p < 0.05)


def confidence_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    n = len(values)
    if n < 2:
        raise StatsError("confidence interval needs at least two values")
    m, var = _mean_var(values)
    half = t_ppf(0.5 + level / 2.0, n - 1) * math.sqrt(var) / math.sqrt(n)
    return m - half, m + half


@dataclass(frozen=True)
class Quartiles:
    min: float
    q1: float
    median: float
    q3: float
    max: float


MIN_BOXPLOT_REPS = 5


def boxplot_export(runs: Sequence[LatencySummary], metric: str) -> Quartiles:
    if len(runs) < MIN_BOXPLOT_REPS:
        raise StatsError(
            f"boxplot needs at least {MIN_BOXPLOT_REPS} repetitions, got {len(runs)}; "
            "repeat the experiment more times (13 is the usual choice)"
        )
    values = [r.metric(metric) for r in runs]
    return Quartiles(min(values), percentile(values, 0.25), percentile(values, 0.5),
                     percentile(values, 0.75), max(values))


# --- CSV I/O ---------------------------------------------------------------

CLIENT_LOG_FIELDS = ["request_id", "send_ns", "recv_ns", "sojourn_ns", "server_id",
                     "server_recv_ns", "service_start_ns", "service_end_ns", "planned_ns"]
SUMMARY_FIELDS = ["scope", "window_start_s", "window_end_s", "n", "mean_ms", "p95_ms", "p99_ms"]
TTEST_FIELDS = ["metric", "t", "dof", "p", "reject"]


def read_client_log(path: str | Path, epoch_ns: int | None = None, client_id: int = 0) -> list[LatencySample]:
    """Load a client CSV log. Offsets are relative to ``epoch_ns`` (default: first send)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if epoch_ns is None:
        epoch_ns = min((int(r["send_ns"]) for r in rows), default=0)
    out = []
    for r in rows:
        start, end = int(r["service_start_ns"]), int(r["service_end_ns"])
        planned = r.get("planned_ns") or r["send_ns"]
        out.append(LatencySample(
            sojourn_ns=int(r["sojourn_ns"]),
            queue_ns=start - int(r["server_recv_ns"]),
            service_ns=end - start,
            completion_offset_s=(int(r["recv_ns"]) - epoch_ns) / 1e9,
            client_id=client_id,
            server_id=int(r["server_id"]),
            send_offset_s=(int(r["send_ns"]) - epoch_ns) / 1e9,
            planned_offset_s=(int(planned) - epoch_ns) / 1e9,
        ))
    return out


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def summary_row(scope: str, start: float | None, end: float | None, s: LatencySummary | None) -> dict:
    return {
        "scope": scope,
        "window_start_s": _fmt(start),
        "window_end_s": _fmt(end),
        "n": 0 if s is None else s.n,
        "mean_ms": "" if s is None else _fmt(s.mean_ms),
        "p95_ms": "" if s is None else _fmt(s.p95_ms),
        "p99_ms": "" if s is None else _fmt(s.p99_ms),
    }


def write_summary_csv(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_summary_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_ttest_csv(path: str | Path, results: dict[str, TTestResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TTEST_FIELDS)
        for metric, r in results.items():
            w.writerow([metric, repr(r.t_statistic), repr(r.degrees_of_freedom), repr(r.p_value),
                        str(r.reject_at_0_05).lower()])
