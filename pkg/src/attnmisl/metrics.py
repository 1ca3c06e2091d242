"""Survival evaluation: C-index, horizon AUC, Kaplan-Meier, log-rank."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


def _arrays(risks, time, event):
    f = np.asarray(risks, dtype=np.float64).reshape(-1)
    t = np.asarray(time, dtype=np.float64).reshape(-1)
    e = np.asarray(event).reshape(-1).astype(bool)
    if not (f.shape == t.shape == e.shape):
        raise DataError("risks, time and event must have equal length")
    return f, t, e


def concordance_index(risks, time, event) -> float:
    """Fraction of comparable pairs (i an event, t_j > t_i) with f_i > f_j; risk ties count 1/2."""
    f, t, e = _arrays(risks, time, event)
    if len(f) < 2:
        raise DataError("need at least two patients")
    num = 0.0
    n_pairs = 0
    for i in np.flatnonzero(e):
        later = t > t[i]
        n = int(later.sum())
        if n == 0:
            continue
        fj = f[later]
        num += np.count_nonzero(f[i] > fj) + 0.5 * np.count_nonzero(f[i] == fj)
        n_pairs += n
    if n_pairs == 0:
        raise DataError("no comparable pairs")
    return num / n_pairs


def survival_auc(risks, time, event, tau=None) -> float:
    """Binary AUC for death by ``tau``; censored-before-``tau`` patients are dropped.

    ``tau`` defaults to the median observed time.
    """
    f, t, e = _arrays(risks, time, event)
    if tau is None:
        tau = float(np.median(t))
    cases = f[e & (t <= tau)]
    controls = f[t > tau]
    if len(cases) == 0 or len(controls) == 0:
        raise DataError(f"no cases or no controls at horizon {tau}")
    # Mann-Whitney via ranks of the pooled sample (average ranks for ties)
    pooled = np.concatenate([cases, controls])
    ranks = _average_ranks(pooled)
    u = ranks[: len(cases)].sum() - len(cases) * (len(cases) + 1) / 2.0
    return float(u / (len(cases) * len(controls)))


def _average_ranks(x):
    order = np.argsort(x, kind="stable")
    xs = x[order]
    first = np.searchsorted(xs, xs, side="left")
    last = np.searchsorted(xs, xs, side="right")
    ranks = np.empty(len(x))
    ranks[order] = (first + last + 1) / 2.0
    return ranks


@dataclass
class KMCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "survival": self.survival.tolist(),
            "at_risk": self.at_risk.tolist(),
            "events": self.events.tolist(),
        }


def _event_table(t, e):
    """Distinct event times with numbers at risk and numbers of events."""
    times = np.unique(t[e])
    t_sorted = np.sort(t)
    at_risk = len(t) - np.searchsorted(t_sorted, times, side="left")
    deaths = np.searchsorted(np.sort(t[e]), times, side="right") - np.searchsorted(np.sort(t[e]), times, side="left")
    return times, at_risk, deaths


def kaplan_meier(time, event) -> KMCurve:
    t = np.asarray(time, dtype=np.float64).reshape(-1)
    e = np.asarray(event).reshape(-1).astype(bool)
    if len(t) == 0:
        raise DataError("empty sample")
    times, n, d = _event_table(t, e)
    surv = np.cumprod(1.0 - d / n)
    return KMCurve(times, surv, n.astype(np.int64), d.astype(np.int64))


def median_risk_split(risks) -> np.ndarray:
    """Boolean "high risk" mask: risk strictly above the lower sample median."""
    f = np.asarray(risks, dtype=np.float64).reshape(-1)
    if len(f) < 2:
        raise DataError("need at least two risks to split")
    med = np.sort(f)[math.ceil(len(f) / 2) - 1]
    high = f > med
    if not high.any():
        raise DataError("all risks identical: degenerate model, median split is empty")
    return high


@dataclass
class LogRankResult:
    statistic: float
    p_value: float


def log_rank_test(time_a, event_a, time_b, event_b) -> LogRankResult:
    ta = np.asarray(time_a, dtype=np.float64)
    tb = np.asarray(time_b, dtype=np.float64)
    ea = np.asarray(event_a).astype(bool)
    eb = np.asarray(event_b).astype(bool)
    if len(ta) == 0 or len(tb) == 0:
        raise DataError("log-rank test needs two non-empty groups")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    if not e.any():
        raise DataError("no events in either group")
    times, n, d = _event_table(t, e)
    n_a = len(ta) - np.searchsorted(np.sort(ta), times, side="left")
    ev_a = np.sort(ta[ea])
    d_a = np.searchsorted(ev_a, times, side="right") - np.searchsorted(ev_a, times, side="left")
    n = n.astype(np.float64)
    expected = d * n_a / n
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    total_var = float(var.sum())
    if total_var <= 0:
        raise DataError("zero variance: groups share no comparable risk structure")
    stat = float((d_a - expected).sum() ** 2 / total_var)
    return LogRankResult(stat, chi2_sf(stat, 1))


# ---------------------------------------------------------------------------
# chi-square tail via the regularized incomplete gamma function

_EPS = 1e-16
_TINY = 1e-300


def _gamma_p_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a, x):
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("need a > 0 and x >= 0")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_contfrac(a, x)


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("need a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi2_cdf(x: float, df: int = 1) -> float:
    return 0.0 if x <= 0 else gamma_p(df / 2.0, x / 2.0)


def chi2_sf(x: float, df: int = 1) -> float:
    return 1.0 if x <= 0 else gamma_q(df / 2.0, x / 2.0)
