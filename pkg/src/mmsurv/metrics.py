"""Survival evaluation: time-dependent concordance, censoring-weighted
Brier score / IBS, and the combined calibration-discrimination score.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .preprocessing import interval_index


@dataclass
class EvalInput:
    survival: np.ndarray  # (T,) monotone non-increasing curve over the bins
    time: float
    event: bool


@dataclass
class StepFunction:
    """Right-continuous step function starting at 1.0."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right") - 1
        vals = np.concatenate([[1.0], self.values])
        return vals[idx + 1]

    def left_limit(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left") - 1
        vals = np.concatenate([[1.0], self.values])
        return vals[idx + 1]


def km_estimator(labels) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survival function G.

    Censorings play the role of events; everyone with follow-up >= s is at
    risk at s regardless of status.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("no labels")
    times = np.array([l.time for l in labels])
    censored = np.array([not l.event for l in labels])
    jump_times = np.unique(times[censored])
    if jump_times.size == 0:
        return StepFunction(times=np.empty(0), values=np.empty(0))
    values = []
    g = 1.0
    for s in jump_times:
        at_risk = np.sum(times >= s)
        drops = np.sum(censored & (times == s))
        g *= 1.0 - drops / at_risk
        values.append(g)
    return StepFunction(times=jump_times, values=np.array(values))


def concordance_td(inputs: Sequence[EvalInput], edges: np.ndarray) -> float:
    """Time-dependent concordance over comparable pairs.

    Pair (i, j) is comparable iff t_i < t_j and patient i had the event;
    it counts as concordant when i's predicted survival at their own event
    bin is lower than j's at the same bin. Prediction ties score 0.5.
    """
    frac, pairs = _concordance_with_pairs(inputs, edges)
    if pairs == 0:
        raise ValueError("no comparable pairs")
    return frac


def _concordance_with_pairs(inputs: Sequence[EvalInput], edges: np.ndarray) -> tuple[float, int]:
    s = np.stack([x.survival for x in inputs])
    t = np.array([x.time for x in inputs])
    e = np.array([x.event for x in inputs])
    kappa = interval_index(t, edges)
    at_bin = s[:, kappa - 1]  # at_bin[j, i] = S_j evaluated at i's event bin
    own = np.diag(at_bin)
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    np.fill_diagonal(comparable, False)
    if not comparable.any():
        return 0.0, 0
    other = at_bin.T  # other[i, j] = S_j at i's bin
    score = np.where(own[:, None] < other, 1.0, np.where(own[:, None] == other, 0.5, 0.0))
    n_pairs = int(comparable.sum())
    return float(score[comparable].sum() / n_pairs), n_pairs


def brier_at(inputs: Sequence[EvalInput], g: StepFunction, edges: np.ndarray,
             t: float) -> float:
    """Censoring-weighted Brier score at one time point."""
    s = np.stack([x.survival for x in inputs])
    times = np.array([x.time for x in inputs])
    events = np.array([x.event for x in inputs])
    n = len(inputs)
    bin_idx = int(interval_index(t, edges)) - 1
    s_t = s[:, bin_idx]
    total = 0.0
    dropped = 0
    for i in range(n):
        if times[i] <= t and events[i]:
            w = float(g.left_limit(times[i]))
            if w == 0.0:
                dropped += 1
                continue
            total += s_t[i] ** 2 / w
        elif times[i] > t:
            w = float(g(t))
            if w == 0.0:
                dropped += 1
                continue
            total += (1.0 - s_t[i]) ** 2 / w
    if dropped:
        warnings.warn(f"dropped {dropped} zero-weight terms at t={t:g}", RuntimeWarning)
    return total / n


def integrated_brier(inputs: Sequence[EvalInput], g: StepFunction,
                     edges: np.ndarray) -> float:
    """Brier score averaged over bin midpoints, width-weighted over the span."""
    edges = np.asarray(edges, dtype=np.float64)
    mids = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    span = edges[-1] - edges[0]
    if span <= 0:
        raise ValueError("degenerate bin edges")
    scores = np.array([brier_at(inputs, g, edges, m) for m in mids])
    return float(np.sum(scores * widths) / span)


def cs_score(c_index: float, ibs: float) -> float:
    """Combined discrimination/calibration score."""
    if not 0.0 <= c_index <= 1.0:
        raise ValueError("c_index outside [0,1]")
    if not 0.0 <= ibs <= 1.0:
        raise ValueError("ibs outside [0,1]")
    return (c_index + (1.0 - ibs)) / 2.0


def evaluate_survival(inputs: Sequence[EvalInput], edges: np.ndarray) -> dict:
    """C-index, IBS (censoring KM fit on these labels), CS-score, and counts."""
    frac, pairs = _concordance_with_pairs(inputs, edges)
    if pairs == 0:
        raise ValueError("no comparable pairs")
    g = km_estimator([_Label(x.time, x.event) for x in inputs])
    ibs = integrated_brier(inputs, g, edges)
    return {
        "c_index": frac,
        "ibs": ibs,
        "cs_score": cs_score(frac, min(max(ibs, 0.0), 1.0)),
        "n": len(inputs),
        "comparable_pairs": pairs,
    }


@dataclass
class _Label:
    time: float
    event: bool
