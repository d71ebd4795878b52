"""Summary statistics, empirical-vs-theory comparison and k-convergence reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, GridError


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    variance: float
    stderr: float


def summarize(samples: Sequence[float]) -> Summary:
    """Mean, unbiased variance and standard error.

    Sums are exactly rounded (``math.fsum``) so the result does not depend
    on the order of the samples.
    """
    xs = np.asarray(samples, dtype=float).ravel()
    n = xs.shape[0]
    if n < 2:
        raise DomainError("variance needs at least two samples")
    mean = math.fsum(xs) / n
    dev = xs - mean
    variance = math.fsum(dev * dev) / (n - 1)
    return Summary(n, mean, variance, math.sqrt(variance / n))


class RunningSummary:
    """Mergeable single-pass accumulator (Welford update, Chan merge)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)
        return self

    def extend(self, xs):
        for x in xs:
            self.push(float(x))
        return self

    def merge(self, other: "RunningSummary") -> "RunningSummary":
        out = RunningSummary()
        out.n = self.n + other.n
        if out.n == 0:
            return out
        delta = other.mean - self.mean
        out.mean = self.mean + delta * other.n / out.n
        out.m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / out.n
        return out

    def summary(self) -> Summary:
        if self.n < 2:
            raise DomainError("variance needs at least two samples")
        var = self.m2 / (self.n - 1)
        return Summary(self.n, self.mean, var, math.sqrt(var / self.n))


@dataclass(frozen=True)
class Verdict:
    passed: bool
    margin: float  # allowance minus |mean - reference|; >= 0 on pass
    deviation: float
    allowance: float
    z_score: float


def compare(result, reference: float, sigma_budget: float, bias_budget: float) -> Verdict:
    """Pass iff |mean - reference| <= sigma_budget * stderr + bias_budget.

    ``result`` is anything with ``mean`` and ``stderr`` attributes.
    """
    deviation = abs(result.mean - reference)
    allowance = sigma_budget * result.stderr + bias_budget
    z = (result.mean - reference) / result.stderr if result.stderr > 0 else (0.0 if deviation == 0 else math.inf)
    return Verdict(deviation <= allowance, allowance - deviation, deviation, allowance, z)


@dataclass
class ExperimentResult:
    """Per-replicate functionals X_t(f) from ``run_replicates``.

    ``values[r, i, j]`` is X_{t_i}(f_j) in replicate r (NaN where a
    truncated replicate has no snapshot).  ``totals`` holds the particle
    counts per snapshot.
    """

    k: int
    master_seed: int
    snapshot_times: np.ndarray
    function_names: tuple
    values: np.ndarray
    totals: np.ndarray
    truncated: tuple = ()
    events: Optional[np.ndarray] = None
    occupation: Optional[np.ndarray] = None
    births: Optional[np.ndarray] = None
    reference: Optional[float] = None
    provenance: str = ""
    traces: Optional[list] = field(default=None, repr=False)

    @property
    def n(self):
        return self.values.shape[0]

    def _index(self, t, f):
        hits = np.nonzero(self.snapshot_times == t)[0]
        if hits.size == 0:
            raise GridError(f"time {t} is not a snapshot time")
        if isinstance(f, str):
            try:
                j = self.function_names.index(f)
            except ValueError:
                raise GridError(f"no functional named {f!r}") from None
        else:
            j = int(f)
        return int(hits[0]), j

    def samples(self, t, f, kind="laplace"):
        i, j = self._index(t, f)
        x = self.values[:, i, j]
        x = x[~np.isnan(x)]
        if kind == "laplace":
            return np.exp(-x)
        if kind == "mean":
            return x
        raise DomainError(f"unknown functional kind {kind!r}")

    def summary(self, t, f, kind="laplace") -> Summary:
        return summarize(self.samples(t, f, kind))

    def z_score(self, t, f, reference, kind="laplace"):
        s = self.summary(t, f, kind)
        return (s.mean - reference) / s.stderr if s.stderr > 0 else math.nan


@dataclass(frozen=True)
class ConvergenceRow:
    k: int
    gap: float
    stderr: float


@dataclass(frozen=True)
class ConvergenceReport:
    rows: tuple
    slope: Optional[float]
    determinate: bool
    expected_slope: float = -1.0
    slope_tolerance: float = 0.5

    @property
    def consistent(self):
        """True when the fitted slope is within tolerance of the working rate."""
        return self.determinate and abs(self.slope - self.expected_slope) <= self.slope_tolerance


def convergence_report(gaps_by_k, expected_slope=-1.0, slope_tolerance=0.5) -> ConvergenceReport:
    """Least-squares slope of log|gap| against log k.

    ``gaps_by_k`` maps k to ``(gap, stderr)``.  Rows whose gap does not
    exceed twice its stderr are not resolved; with fewer than three resolved
    rows the slope is indeterminate.  The default O(1/k) rate is a working
    hypothesis, exposed through ``expected_slope``.
    """
    rows = tuple(ConvergenceRow(int(k), float(g), float(s)) for k, (g, s) in sorted(gaps_by_k.items()))
    resolved = [r for r in rows if abs(r.gap) > 2 * r.stderr and r.gap != 0]
    if len({r.k for r in resolved}) < 3:
        return ConvergenceReport(rows, None, False, expected_slope, slope_tolerance)
    lk = np.log([r.k for r in resolved])
    lg = np.log([abs(r.gap) for r in resolved])
    slope = float(np.polyfit(lk, lg, 1)[0])
    return ConvergenceReport(rows, slope, True, expected_slope, slope_tolerance)
