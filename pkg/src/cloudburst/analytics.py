"""Tail-latency models and trace statistics.

Order statistics of per-packet latency: if ``n`` symbols are in flight with
iid latency CDF ``F`` and the message needs the first ``j`` of them, the
completion time is the ``j``-th order statistic X_(j). Its cdf is the
binomial tail ``sum_{i>=j} C(n,i) F^i (1-F)^(n-i)``.

Empirical percentiles use the nearest-rank convention: the p-quantile of N
sorted samples is sample number ``ceil(p * N)`` (1-based).
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .netsim.trace import TraceLog

INF = float("inf")


class ModelUnderdetermined(ValueError):
    pass


# -- latency distributions ------------------------------------------------------------


class LatencyCdf:
    """Per-packet latency distribution F_P with optional density."""

    lo: float = 0.0
    hi: float = INF

    def cdf(self, t: float) -> float:
        raise NotImplementedError

    def pdf(self, t: float) -> float:
        raise NotImplementedError

    def __call__(self, t: float) -> float:
        return self.cdf(t)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def continuous(self) -> bool:
        return True


@dataclass(frozen=True)
class Uniform(LatencyCdf):
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("Uniform needs b > a")

    @property
    def lo(self):
        return self.a

    @property
    def hi(self):
        return self.b

    def cdf(self, t):
        return min(1.0, max(0.0, (t - self.a) / (self.b - self.a)))

    def pdf(self, t):
        return 1.0 / (self.b - self.a) if self.a <= t <= self.b else 0.0

    def sample(self, rng, size):
        return rng.uniform(self.a, self.b, size)


@dataclass(frozen=True)
class Exponential(LatencyCdf):
    rate: float = 1.0
    shift: float = 0.0  # fixed base latency before the exponential part

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("Exponential needs rate > 0")

    @property
    def lo(self):
        return self.shift

    def cdf(self, t):
        return 0.0 if t <= self.shift else -math.expm1(-self.rate * (t - self.shift))

    def pdf(self, t):
        return 0.0 if t < self.shift else self.rate * math.exp(-self.rate * (t - self.shift))

    def sample(self, rng, size):
        return self.shift + rng.exponential(1.0 / self.rate, size)


class Mixture(LatencyCdf):
    """Weighted mixture, e.g. a packet picks a fast or a slow path."""

    def __init__(self, components: Sequence[LatencyCdf], weights: Optional[Sequence[float]] = None):
        if not components:
            raise ValueError("empty mixture")
        w = [1.0] * len(components) if weights is None else list(weights)
        if len(w) != len(components) or min(w) < 0 or sum(w) <= 0:
            raise ValueError("bad mixture weights")
        total = sum(w)
        self.components = list(components)
        self.weights = [x / total for x in w]

    @property
    def lo(self):
        return min(c.lo for c in self.components)

    @property
    def hi(self):
        return max(c.hi for c in self.components)

    @property
    def continuous(self):
        return all(c.continuous for c in self.components)

    def cdf(self, t):
        return sum(w * c.cdf(t) for w, c in zip(self.weights, self.components))

    def pdf(self, t):
        return sum(w * c.pdf(t) for w, c in zip(self.weights, self.components))

    def sample(self, rng, size):
        which = rng.choice(len(self.components), size=size, p=self.weights)
        out = np.empty(size)
        for i, c in enumerate(self.components):
            idx = np.flatnonzero(which == i)
            if idx.size:
                out[idx] = c.sample(rng, idx.size)
        return out


class Empirical(LatencyCdf):
    """Step CDF of observed samples (no density)."""

    def __init__(self, samples: Sequence[float]):
        xs = sorted(float(x) for x in samples)
        if not xs:
            raise ValueError("no samples")
        self.samples = xs

    @property
    def lo(self):
        return self.samples[0]

    @property
    def hi(self):
        return self.samples[-1]

    @property
    def continuous(self):
        return False

    def cdf(self, t):
        return bisect.bisect_right(self.samples, t) / len(self.samples)

    def pdf(self, t):
        raise TypeError("an empirical CDF has no density")

    def sample(self, rng, size):
        return rng.choice(np.asarray(self.samples), size=size, replace=True)


def parametric(family: str, **params) -> LatencyCdf:
    families = {"uniform": Uniform, "exponential": Exponential}
    try:
        return families[family](**params)
    except KeyError:
        raise ValueError(f"unknown family {family!r}") from None


CdfLike = Union[LatencyCdf, Callable[[float], float]]


def _cdf_fn(F: CdfLike) -> Callable[[float], float]:
    return F.cdf if isinstance(F, LatencyCdf) else F


# -- order statistics -----------------------------------------------------------------


def _log_coef(j: int, n: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(j) - math.lgamma(n - j + 1)


def order_stat_pdf(j: int, n: int, F: CdfLike, f: Callable[[float], float], x: float) -> float:
    """Density of the j-th smallest of n iid samples at x."""
    if not 1 <= j <= n:
        raise ValueError("need 1 <= j <= n")
    fx = f(x)
    if fx <= 0:
        return 0.0
    Fx = _cdf_fn(F)(x)
    if (Fx <= 0 and j > 1) or (Fx >= 1 and j < n):
        return 0.0
    log = _log_coef(j, n) + math.log(fx)
    if j > 1:
        log += (j - 1) * math.log(Fx)
    if n > j:
        log += (n - j) * math.log1p(-Fx)
    return math.exp(log)


def order_stat_cdf(j: int, n: int, F: CdfLike, x: float) -> float:
    """P(X_(j) <= x): at least j of n samples fall at or below x."""
    if not 1 <= j <= n:
        raise ValueError("need 1 <= j <= n")
    p = min(1.0, max(0.0, _cdf_fn(F)(x)))
    if p <= 0:
        return 0.0
    if p >= 1:
        return 1.0
    lp, lq = math.log(p), math.log1p(-p)
    total = 0.0
    for i in range(j, n + 1):
        total += math.exp(math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
                          + i * lp + (n - i) * lq)
    return min(1.0, total)


# -- percentiles ------------------------------------------------------------------------


def nearest_rank(values: Sequence[float], p: float) -> float:
    """p-quantile by nearest rank; values may contain +inf for failures."""
    if not values:
        raise ValueError("no values")
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    xs = sorted(values)
    return xs[max(0, math.ceil(p * len(xs) - 1e-12) - 1)]


def _bisect(G: Callable[[float], float], p: float, lo: float, hi: float, rtol: float) -> float:
    if math.isinf(lo):
        lo = -1.0
        while G(lo) > p:
            lo *= 2
    if math.isinf(hi):
        hi = max(1.0, abs(lo) + 1.0)
        while G(hi) < p:
            hi *= 2
    while hi - lo > rtol * max(abs(lo), abs(hi), 1e-300):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if G(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def percentile(F: CdfLike, p: float, rtol: float = 1e-9) -> float:
    """t_p with F(t_p) = p, e.g. T99 for p = 0.99."""
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    if isinstance(F, Empirical):
        return nearest_rank(F.samples, p)
    if isinstance(F, LatencyCdf):
        return _bisect(F.cdf, p, F.lo, F.hi, rtol)
    return _bisect(F, p, -INF, INF, rtol)


# -- completion-time model ------------------------------------------------------------


@dataclass(frozen=True)
class FecModelParams:
    k: int
    s: float = 1.0  # eventual coding rate: k*s symbols complete the message
    n_sent: Optional[int] = None  # symbols in flight; defaults to ceil(k*s)

    @property
    def needed(self) -> int:
        # guard against k*s landing a hair above an integer in floating point
        return max(1, math.ceil(self.k * self.s - 1e-9))

    @property
    def n_effective(self) -> int:
        return self.needed if self.n_sent is None else self.n_sent


def fec_completion_quantile(params: FecModelParams, F: LatencyCdf, p: float,
                            rtol: float = 1e-9) -> float:
    """p-quantile of the ceil(k*s)-th fastest of n_sent symbol latencies."""
    j, n = params.needed, params.n_effective
    if n < j:
        raise ModelUnderdetermined(f"{n} symbols in flight cannot supply the {j} needed")
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")

    def G(x):
        return order_stat_cdf(j, n, F, x)

    if isinstance(F, LatencyCdf) and not F.continuous:
        support = sorted(set(F.samples)) if isinstance(F, Empirical) else None
        if support is not None:
            i = bisect.bisect_left([G(x) for x in support], p)
            return support[min(i, len(support) - 1)]
    lo, hi = (F.lo, F.hi) if isinstance(F, LatencyCdf) else (-INF, INF)
    return _bisect(G, p, lo, hi, rtol)


def expected_retx_latency(M: float, C: float, p_d: float) -> float:
    """Mean time to push M packets over capacity C with per-attempt loss p_d."""
    if not 0 <= p_d < 1 or M < 1 or C <= 0:
        raise ValueError("need 0 <= p_d < 1, M >= 1, C > 0")
    return M / ((1 - p_d) * C)


def expected_fec_latency(M: float, C: float, p_d: float, d: int) -> float:
    if d < 1:
        raise ValueError("d must be >= 1")
    return expected_retx_latency(M, C, p_d) / d


def retx_latency_partial_sum(M: float, C: float, p_d: float, terms: int) -> float:
    """(1-p_d)(M/C) sum_{i<terms} (i+1) p_d^i, converging to the closed form."""
    if not 0 <= p_d < 1:
        raise ValueError("need 0 <= p_d < 1")
    acc, pw = 0.0, 1.0
    for i in range(terms):
        acc += (i + 1) * pw
        pw *= p_d
    return (1 - p_d) * (M / C) * acc


# -- trace summaries ---------------------------------------------------------------------


@dataclass
class SizeRow:
    scheme: str
    size: int
    count: int
    completed: int
    failed: int
    mean_us: float
    p50_us: float
    p95_us: float
    p99_us: float
    coding_rate_sent: float
    coding_rate_received: float


@dataclass
class Summary:
    rows: list[SizeRow] = field(default_factory=list)
    drops: dict[str, dict[str, int]] = field(default_factory=dict)
    throughput: dict[str, float] = field(default_factory=dict)  # flow -> mean Gb/s
    unserved: int = 0

    def row(self, size: int, scheme: Optional[str] = None) -> SizeRow:
        for r in self.rows:
            if r.size == size and (scheme is None or r.scheme == scheme):
                return r
        raise KeyError(size)

    @property
    def overall(self) -> list[SizeRow]:
        return [r for r in self.rows if r.size == 0]


SUMMARY_FIELDS = ["scheme", "size", "count", "completed", "failed", "mean_us", "p50_us",
                  "p95_us", "p99_us", "coding_rate_sent", "coding_rate_received"]


def mct_values(messages, size: Optional[int] = None) -> list[float]:
    """MCTs in seconds; undelivered messages count as +inf. Unserved ones are skipped."""
    out = []
    for m in messages:
        if m.status == "unserved" or (size is not None and m.size != size):
            continue
        out.append(INF if m.mct is None else m.mct)
    return out


def _size_row(scheme: str, size: int, msgs) -> SizeRow:
    vals = mct_values(msgs)
    done = [v for v in vals if v != INF]
    rates_s = [m.symbols_sent / m.k for m in msgs if m.completion is not None and m.symbols_sent]
    rates_r = [m.symbols_received / m.k for m in msgs if m.completion is not None and m.symbols_received]

    def q(p):
        return nearest_rank(vals, p) * 1e6 if vals else math.nan

    return SizeRow(
        scheme, size, len(vals), len(done), len(vals) - len(done),
        sum(done) / len(done) * 1e6 if done else math.nan,
        q(0.5), q(0.95), q(0.99),
        float(np.mean(rates_s)) if rates_s else math.nan,
        float(np.mean(rates_r)) if rates_r else math.nan,
    )


def summarize(trace: TraceLog) -> Summary:
    """Per-size MCT statistics (size 0 = all sizes), coding rates, drops, throughput.

    Percentiles count undelivered messages as +inf; the mean covers delivered
    messages only.
    """
    s = Summary()
    by_scheme: dict[str, list] = {}
    for m in trace.messages:
        if m.status == "unserved":
            s.unserved += 1
            continue
        by_scheme.setdefault(m.scheme, []).append(m)
    for scheme, msgs in sorted(by_scheme.items()):
        for size in sorted({m.size for m in msgs}):
            s.rows.append(_size_row(scheme, size, [m for m in msgs if m.size == size]))
        s.rows.append(_size_row(scheme, 0, msgs))
    for row in trace.port_stats:
        agg = s.drops.setdefault(row["class"], {"enqueued": 0, "dropped": 0, "marked": 0})
        for key in agg:
            agg[key] += int(row[key])
    acc: dict[str, list[float]] = {}
    for smp in trace.throughput:
        acc.setdefault(f"{smp.kind}:{smp.flow}", []).append(smp.gbps)
    s.throughput = {k: float(np.mean(v)) for k, v in sorted(acc.items())}
    return s


def summary_csv(summary: Summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in summary.rows:
        w.writerow([r.scheme, r.size, r.count, r.completed, r.failed]
                   + [f"{getattr(r, f):.3f}" for f in SUMMARY_FIELDS[5:]])
    return buf.getvalue()


def percentile_table(summary: Summary) -> str:
    lines = [f"{'scheme':<7}{'size':>8}{'count':>8}{'failed':>8}{'mean_us':>12}"
             f"{'p50_us':>12}{'p95_us':>12}{'p99_us':>12}{'rate_sent':>11}"]
    for r in summary.rows:
        label = "all" if r.size == 0 else str(r.size)
        lines.append(f"{r.scheme:<7}{label:>8}{r.count:>8}{r.failed:>8}{r.mean_us:>12.1f}"
                     f"{r.p50_us:>12.1f}{r.p95_us:>12.1f}{r.p99_us:>12.1f}"
                     f"{r.coding_rate_sent:>11.3f}")
    if summary.drops:
        lines.append("")
        for cls, d in sorted(summary.drops.items()):
            lines.append(f"{cls:<11} enqueued={d['enqueued']} dropped={d['dropped']} marked={d['marked']}")
    if summary.unserved:
        lines.append(f"unserved requests: {summary.unserved}")
    return "\n".join(lines) + "\n"


def write_summary(summary: Summary, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out / "summary.csv", "percentiles": out / "percentiles.txt"}
    paths["summary"].write_text(summary_csv(summary))
    paths["percentiles"].write_text(percentile_table(summary))
    return paths
