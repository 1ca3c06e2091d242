"""Negative log Cox partial likelihood with Breslow handling of tied times.

    L(o) = sum_{i: event_i} ( -o_i + log sum_{j: t_j >= t_i} exp(o_j) )
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, NumericalError


def _check(risks, time, event):
    o = np.asarray(risks, dtype=np.float64).reshape(-1)
    t = np.asarray(time, dtype=np.float64).reshape(-1)
    e = np.asarray(event).reshape(-1).astype(bool)
    if o.size == 0:
        raise DataError("empty input")
    if not (o.shape == t.shape == e.shape):
        raise DataError(f"length mismatch: risks {o.shape}, time {t.shape}, event {e.shape}")
    if not np.all(np.isfinite(o)):
        raise NumericalError("non-finite risk scores")
    return o, t, e


def risk_set_log_denominators(risks, time):
    """``log sum_{j: t_j >= t_i} exp(o_j)`` for every i, in O(n log n)."""
    o = np.asarray(risks, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    order = np.argsort(-t, kind="stable")
    ts = t[order]
    run = np.logaddexp.accumulate(o[order])
    # tied times share the risk set of the last member of their tie block
    last_of_tie = np.searchsorted(-ts, -ts, side="right") - 1
    out = np.empty_like(o)
    out[order] = run[last_of_tie]
    return out


def cox_loss(risks, time, event, reduction="sum") -> float:
    """``reduction="mean"`` divides by the number of events (0 when there are none)."""
    o, t, e = _check(risks, time, event)
    if not e.any():
        return 0.0
    logden = risk_set_log_denominators(o, t)
    loss = float(np.sum(logden[e] - o[e]))
    if reduction == "mean":
        loss /= int(e.sum())
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


def cox_loss_gradient(risks, time, event, reduction="sum") -> np.ndarray:
    """dL/do_j = -event_j + sum_{i: event_i, t_i <= t_j} exp(o_j - logden_i)."""
    o, t, e = _check(risks, time, event)
    grad = np.zeros_like(o)
    if not e.any():
        return grad
    logden = risk_set_log_denominators(o, t)
    ev_t = t[e]
    ev_order = np.argsort(ev_t, kind="stable")
    ev_t = ev_t[ev_order]
    # running log of sum_i 1/den_i over events sorted by ascending time
    log_cum = np.logaddexp.accumulate(-logden[e][ev_order])
    n_le = np.searchsorted(ev_t, t, side="right")
    has = n_le > 0
    grad[has] = np.exp(o[has] + log_cum[n_le[has] - 1])
    grad -= e
    if reduction == "mean":
        grad /= int(e.sum())
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return grad
