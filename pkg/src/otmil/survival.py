"""Survival evaluation: Harrell's C, Kaplan-Meier, log-rank, median split."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)


class SurvivalError(ValueError):
    pass


@dataclass
class Cohort:
    risks: np.ndarray
    times: np.ndarray
    events: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.risks = np.asarray(self.risks, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.events = np.asarray(self.events, dtype=bool)
        n = len(self.times)
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if not (len(self.risks) == len(self.events) == len(self.ids) == n):
            raise SurvivalError("cohort fields differ in length")
        if np.any(self.times <= 0):
            raise SurvivalError("survival times must be positive")

    def __len__(self) -> int:
        return len(self.times)

    def subset(self, mask) -> "Cohort":
        mask = np.asarray(mask, dtype=bool)
        return Cohort(
            self.risks[mask], self.times[mask], self.events[mask],
            [i for i, keep in zip(self.ids, mask) if keep],
        )


@dataclass
class SurvivalCurve:
    time_points: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    observed_events: np.ndarray

    def at(self, t: float) -> float:
        """Step-function value S(t) (right-continuous)."""
        idx = np.searchsorted(self.time_points, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def concordance_counts(risks, times, events) -> tuple[int, int]:
    """Return ``(2 * concordant + ties, 2 * comparable)`` as exact integers."""
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    score = 2 * np.sum(comparable & (r[:, None] > r[None, :])) + np.sum(
        comparable & (r[:, None] == r[None, :])
    )
    return int(score), int(2 * comparable.sum())


def c_index(cohort: Cohort) -> float:
    """Harrell's C: a pair is comparable when the earlier time is an event."""
    score, total = concordance_counts(cohort.risks, cohort.times, cohort.events)
    if total == 0:
        raise SurvivalError("no comparable pairs")
    return score / total


def stratify_by_median(cohort: Cohort) -> tuple[Cohort, Cohort]:
    """Split at the median risk; strictly greater goes to the high group."""
    if len(cohort) < 2:
        raise SurvivalError("need at least two subjects to stratify")
    high = cohort.risks > np.median(cohort.risks)
    if not high.any():
        log.warning("all risks equal the median; high-risk group is empty")
    return cohort.subset(high), cohort.subset(~high)


def km_curve(times, events) -> SurvivalCurve:
    """Product-limit estimate evaluated at every distinct observed time.

    Subjects censored at ``t`` stay at risk for events at ``t``.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    if t.size == 0:
        raise SurvivalError("empty sample")
    points = np.unique(t)
    at_risk = np.array([np.sum(t >= u) for u in points], dtype=np.int64)
    deaths = np.array([np.sum((t == u) & e) for u in points], dtype=np.int64)
    surv = np.cumprod(1.0 - deaths / at_risk)
    return SurvivalCurve(points, surv, at_risk, deaths)


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    # modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_upper_regularized(a: float, x: float) -> float:
    """Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_continued_fraction(a, x)


def chi2_sf(x: float, dof: int = 1) -> float:
    return gamma_upper_regularized(dof / 2.0, x / 2.0)


class LogRankResult(NamedTuple):
    chi_square: float
    p_value: float


def log_rank_terms(a: Cohort, b: Cohort) -> tuple[float, float, float]:
    """Observed and expected events in ``a`` and the hypergeometric variance."""
    if len(a) == 0 or len(b) == 0:
        raise SurvivalError("both groups must be nonempty")
    times = np.concatenate([a.times, b.times])
    events = np.concatenate([a.events, b.events])
    in_a = np.concatenate([np.ones(len(a), bool), np.zeros(len(b), bool)])
    observed = expected = variance = 0.0
    for u in np.unique(times[events]):
        risk = times >= u
        n = risk.sum()
        n_a = (risk & in_a).sum()
        d = ((times == u) & events).sum()
        observed += ((times == u) & events & in_a).sum()
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    return float(observed), float(expected), float(variance)


def log_rank_test(a: Cohort, b: Cohort) -> LogRankResult:
    """Two-group log-rank test; p-value from the chi-square(1) tail."""
    observed, expected, variance = log_rank_terms(a, b)
    if variance <= 0:
        raise SurvivalError("log-rank variance is zero")
    chi = (observed - expected) ** 2 / variance
    return LogRankResult(chi, chi2_sf(chi))
