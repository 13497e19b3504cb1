"""Survival and disentanglement evaluation.

Survival side: Harrell's concordance, the censoring-weighted (IPCW)
concordance, Kaplan-Meier curves, the two-group log-rank test, and a
univariate Cox hazard ratio fitted by Newton-Raphson. Disentanglement side:
distance correlation (same implementation the loss uses), the absolute-
cosine orthogonal score, and the combined report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .objectives import distance_correlation_tensor
from .serialize import dump_json, write_csv


def _as_arrays(risks, times, events):
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    if not (r.shape == t.shape == e.shape) or r.ndim != 1:
        raise NumericalError("risks, times, events must be 1-d and equal length")
    return r, t, e


# -- concordance ---------------------------------------------------------------

def concordance_index(risks, times, events):
    """Harrell's C: over pairs with time_i < time_j and an event at i,
    the fraction ranked correctly, counting tied risks as 1/2."""
    r, t, e = _as_arrays(risks, times, events)
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n_comp = comparable.sum()
    if n_comp == 0:
        raise NumericalError("no comparable pairs for the concordance index")
    higher = r[:, None] > r[None, :]
    tied = r[:, None] == r[None, :]
    score = np.where(higher, 1.0, np.where(tied, 0.5, 0.0))
    return float((score * comparable).sum() / n_comp)


def concordance_index_ipcw(risks, times, events, tau):
    """Censoring-weighted concordance (Uno's truncated estimator).

    Pairs are restricted to events before min(time_j, tau) and weighted by
    the inverse squared censoring survival just before the event time.
    """
    if tau <= 0:
        raise NumericalError("tau must be positive")
    r, t, e = _as_arrays(risks, times, events)
    curve = censoring_km(t, e)
    g_left = curve.evaluate(t, left=True)

    comparable = (t[:, None] < t[None, :]) & e[:, None] & (t[:, None] < tau)
    used = comparable.any(axis=1)
    if not used.any():
        raise NumericalError("no comparable pairs below tau")
    if np.any(g_left[used] <= 0.0):
        raise NumericalError("censoring survival reaches 0 before tau at a "
                             "needed event time")
    weights = np.zeros_like(g_left)
    weights[used] = 1.0 / g_left[used] ** 2

    higher = r[:, None] > r[None, :]
    tied = r[:, None] == r[None, :]
    score = np.where(higher, 1.0, np.where(tied, 0.5, 0.0))
    num = (weights[:, None] * score * comparable).sum()
    den = (weights[:, None] * comparable).sum()
    return float(num / den)


# -- product-limit curves --------------------------------------------------------

@dataclass(frozen=True)
class SurvivalCurve:
    """Step function from a product-limit fit.

    `event_times` are the distinct times carrying at least one counted
    event; `survival` holds S just after each of them.
    """

    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def evaluate(self, t, left=False):
        """S(t); with left=True the left limit S(t-)."""
        t = np.asarray(t, dtype=np.float64)
        side = "left" if left else "right"
        idx = np.searchsorted(self.event_times, t, side=side)
        padded = np.concatenate([[1.0], self.survival])
        return padded[idx]


def _product_limit(times, flags):
    t = np.asarray(times, dtype=np.float64)
    f = np.asarray(flags, dtype=bool)
    order = np.argsort(t, kind="stable")
    t, f = t[order], f[order]
    distinct, idx = np.unique(t, return_index=True)
    n = t.size
    at_risk_all = n - idx
    counts = np.add.reduceat(f.astype(np.int64), idx)
    keep = counts > 0
    event_times = distinct[keep]
    at_risk = at_risk_all[keep]
    events = counts[keep]
    with np.errstate(invalid="ignore"):
        factors = 1.0 - events / at_risk
    survival = np.cumprod(factors)
    return SurvivalCurve(event_times=event_times, survival=survival,
                         at_risk=at_risk.astype(np.int64),
                         events=events.astype(np.int64))


def kaplan_meier(times, events):
    """Product-limit estimate of the event-time survival function."""
    return _product_limit(times, events)


def censoring_km(times, events):
    """Product-limit estimate of the censoring distribution G (flags
    inverted); use evaluate(t, left=True) for G(t-)."""
    return _product_limit(times, ~np.asarray(events, dtype=bool))


# -- log-rank test -----------------------------------------------------------------

def logrank_test(times_a, events_a, times_b, events_b):
    """Two-group log-rank test; returns (chi_square, p_value).

    p is the exact 1-df chi-square upper tail, erfc(sqrt(chi2 / 2)).
    """
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=bool)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=bool)
    if ta.size == 0 or tb.size == 0:
        raise NumericalError("both groups must be non-empty")

    times = np.concatenate([ta, tb])
    events = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    if not events.any():
        raise NumericalError("log-rank test needs at least one event")

    observed_minus_expected = 0.0
    variance = 0.0
    for t in np.unique(times[events]):
        at_risk = times >= t
        n = at_risk.sum()
        n1 = (at_risk & in_a).sum()
        dead = events & (times == t)
        d = dead.sum()
        d1 = (dead & in_a).sum()
        observed_minus_expected += d1 - d * n1 / n
        if n > 1:
            variance += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1)
    if variance <= 0.0:
        raise NumericalError("log-rank variance is zero (no informative "
                             "event times)")
    chi_square = observed_minus_expected ** 2 / variance
    p_value = math.erfc(math.sqrt(chi_square / 2.0))
    return float(chi_square), float(p_value)


# -- univariate Cox hazard ratio ------------------------------------------------------

def cox_univariate_score_info(beta, groups, times, events):
    """Score and information of the Breslow partial likelihood for a binary
    covariate at the given coefficient."""
    x = np.asarray(groups, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    score = 0.0
    info = 0.0
    ebx = np.exp(beta * x)
    for u in np.unique(t[e]):
        at_risk = t >= u
        s0 = ebx[at_risk].sum()
        s1 = (x * ebx)[at_risk].sum()
        dead = e & (t == u)
        d = dead.sum()
        mean = s1 / s0
        score += x[dead].sum() - d * mean
        info += d * (mean - mean * mean)   # x binary: S2 == S1
    return score, info


def hazard_ratio(group_flags, times, events, tol=1e-8, max_iters=100):
    """exp(beta) from a univariate Cox fit on a binary group indicator.

    Newton-Raphson on the Breslow partial likelihood; raises on monotone
    likelihood (complete separation) with the last iterate in the message.
    """
    x = np.asarray(group_flags, dtype=bool)
    e = np.asarray(events, dtype=bool)
    if x.all() or (~x).all():
        raise NumericalError("both groups must be represented")
    if not e.any():
        raise NumericalError("hazard ratio needs at least one event")

    beta = 0.0
    for _ in range(max_iters):
        score, info = cox_univariate_score_info(beta, x, times, events)
        if info <= 0.0:
            raise NumericalError(f"non-convergent hazard ratio fit "
                                 f"(flat information) at beta={beta:.6g}")
        delta = score / info
        beta += delta
        if abs(beta) > 50.0:
            raise NumericalError(f"hazard ratio fit diverged (monotone "
                                 f"likelihood); last beta={beta:.6g}")
        if abs(delta) < tol:
            return float(np.exp(beta))
    raise NumericalError(f"hazard ratio fit did not converge in {max_iters} "
                         f"iterations; last beta={beta:.6g}")


# -- disentanglement ---------------------------------------------------------------------

def distance_correlation(x, y):
    """Evaluation-only distance correlation; same formula as the loss term.

    Returns (value, degenerate_flag).
    """
    dc, degenerate = distance_correlation_tensor(np.asarray(x, dtype=np.float64),
                                                 np.asarray(y, dtype=np.float64))
    return float(dc.data), degenerate


def orthogonal_score(x, y):
    """Absolute cosine similarity between two vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise NumericalError("orthogonal score is undefined for a zero vector")
    return float(abs(np.dot(x, y)) / (nx * ny))


@dataclass(frozen=True)
class DisentanglementReport:
    d1: float
    d2: float
    total: float
    d1_orth: float
    d2_orth: float
    total_orth: float


def disentanglement_report(pooled):
    """Dependence report over pooled per-stream stacks.

    `pooled` maps stream name -> (n, D_z) array for the four streams. d1 is
    the distance correlation between the modality-specific stacks, d2
    between the concatenated specific and shared stacks; the orthogonal
    variant averages per-sample absolute cosines over the same pairings.
    """
    z_gg = np.asarray(pooled["gg"], dtype=np.float64)
    z_hh = np.asarray(pooled["hh"], dtype=np.float64)
    z_hg = np.asarray(pooled["hg"], dtype=np.float64)
    z_gh = np.asarray(pooled["gh"], dtype=np.float64)
    d1, _ = distance_correlation(z_gg, z_hh)
    specific = np.concatenate([z_gg, z_hh], axis=1)
    shared = np.concatenate([z_hg, z_gh], axis=1)
    d2, _ = distance_correlation(specific, shared)

    d1_orth = float(np.mean([orthogonal_score(a, b) for a, b in zip(z_gg, z_hh)]))
    d2_orth = float(np.mean([orthogonal_score(a, b)
                             for a, b in zip(specific, shared)]))
    return DisentanglementReport(d1=d1, d2=d2, total=(d1 + d2) / 2.0,
                                 d1_orth=d1_orth, d2_orth=d2_orth,
                                 total_orth=(d1_orth + d2_orth) / 2.0)


# -- risk stratification -------------------------------------------------------------------

@dataclass(frozen=True)
class StratificationResult:
    hazard_ratio: float
    chi_square: float
    p_value: float
    n_high: int
    n_low: int


def stratify_by_median(risks, times, events):
    """Split at the median risk (ties go to the low-risk group), then
    log-rank + hazard ratio between the groups."""
    r, t, e = _as_arrays(risks, times, events)
    median = float(np.median(r))
    high = r > median
    if not high.any() or high.all():
        raise NumericalError("degenerate median split: all risks on one side")
    chi_square, p_value = logrank_test(t[high], e[high], t[~high], e[~high])
    hr = hazard_ratio(high, t, e)
    result = StratificationResult(hazard_ratio=hr, chi_square=chi_square,
                                  p_value=p_value, n_high=int(high.sum()),
                                  n_low=int((~high).sum()))
    return result, high


def export_km_curves(path, curves):
    """CSV of several labelled curves: (time, survival, at_risk, events, group)."""
    rows = []
    for label, curve in curves:
        for i in range(curve.event_times.size):
            rows.append([float(curve.event_times[i]), float(curve.survival[i]),
                         int(curve.at_risk[i]), int(curve.events[i]), label])
    write_csv(path, ["time", "survival", "at_risk", "events", "group"], rows)


def export_stratification(path, result):
    dump_json({"hr": result.hazard_ratio, "chi_square": result.chi_square,
               "p_value": result.p_value, "n_high": result.n_high,
               "n_low": result.n_low}, path)
