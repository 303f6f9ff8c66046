"""Misclassification and out-of-distribution detection with AUROC / AUPR.

Scores follow one orientation: larger means more uncertain, and the
positive class (misclassified, or OOD) should score high.  Max.P is the
only measure where low means uncertain, so it is negated by
:func:`uncertainty_scores` before ranking.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import rankdata

from .measures import MAX_PROB, MEASURES

__all__ = [
    "ScoredExample",
    "DetectionReport",
    "DegenerateTaskError",
    "auroc",
    "aupr",
    "uncertainty_scores",
    "misclassification_detection",
    "ood_detection",
]


class ScoredExample(NamedTuple):
    score: float
    is_positive: bool


class DegenerateTaskError(ValueError):
    """Detection task with only one class present."""

    def __init__(self, message, error_rate=None):
        self.error_rate = error_rate
        super().__init__(message)


@dataclass
class DetectionReport:
    task: str
    metrics: dict = field(default_factory=dict)
    n_positive: int = 0
    n_negative: int = 0
    error_rate: Optional[float] = None

    def to_dict(self):
        return {
            "task": self.task,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "error_rate": self.error_rate,
            "metrics": {m: dict(v) for m, v in self.metrics.items()},
        }


def _split(examples, positives):
    if positives is None:
        examples = list(examples)
        scores = np.array([e.score for e in examples], dtype=np.float64)
        labels = np.array([bool(e.is_positive) for e in examples])
    else:
        scores = np.asarray(examples, dtype=np.float64)
        labels = np.asarray(positives, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("need one label per score")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels


def auroc(examples, positives=None):
    """Area under the ROC curve as the Mann-Whitney statistic.

    ``P(score_pos > score_neg) + P(tie) / 2`` via the rank sum with
    midranks.  Takes either a list of :class:`ScoredExample` or parallel
    ``scores, positives`` arrays.
    """
    scores, labels = _split(examples, positives)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTaskError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(examples, positives=None):
    """Average precision with positives as the relevant class.

    Examples are walked in descending score order.  Tied scores form one
    group: every positive in the group is credited with the precision
    measured after the whole group is admitted.
    """
    scores, labels = _split(examples, positives)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateTaskError("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    group_end = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[group_end]
    seen = np.flatnonzero(group_end) + 1
    hits = np.diff(np.r_[0, tp])
    # summed exactly and rounded once, so the result is independent of order
    total = sum(Fraction(int(h * t), int(n)) for h, t, n in zip(hits, tp, seen) if h)
    return float(total / n_pos)


def uncertainty_scores(measure, values):
    """Orient raw measure values so larger means more uncertain."""
    values = np.asarray(values, dtype=np.float64)
    return -values if measure == MAX_PROB else values


def _metrics(measures, positives):
    out = {}
    for name in MEASURES:
        if name in measures:
            s = uncertainty_scores(name, measures[name])
            out[name] = {"auroc": auroc(s, positives), "aupr": aupr(s, positives)}
    return out


def misclassification_detection(measures, predictions, labels):
    """Rank misclassified inputs (positives) by each available measure.

    ``measures`` maps measure names to per-example raw values, as returned
    by the ``*_measures`` functions in :mod:`priornet.measures`.
    """
    wrong = np.asarray(predictions) != np.asarray(labels)
    error_rate = float(wrong.mean())
    if wrong.all() or not wrong.any():
        raise DegenerateTaskError(
            f"misclassification detection needs both correct and wrong predictions "
            f"(error rate {error_rate})",
            error_rate,
        )
    report = DetectionReport("misclassification", _metrics(measures, wrong))
    report.n_positive = int(wrong.sum())
    report.n_negative = int(wrong.size - wrong.sum())
    report.error_rate = error_rate
    return report


def ood_detection(in_measures, out_measures, balance=True, seed=0):
    """Separate OOD inputs (positives) from in-domain inputs per measure.

    With ``balance=True`` the larger set is subsampled (seeded) to the size
    of the smaller one.
    """
    n_in = len(next(iter(in_measures.values())))
    n_out = len(next(iter(out_measures.values())))
    if n_in == 0 or n_out == 0:
        raise DegenerateTaskError("OOD detection needs non-empty in-domain and OOD sets")
    keep_in, keep_out = np.arange(n_in), np.arange(n_out)
    if balance and n_in != n_out:
        rng = np.random.default_rng(seed)
        n = min(n_in, n_out)
        if n_in > n:
            keep_in = np.sort(rng.choice(n_in, n, replace=False))
        else:
            keep_out = np.sort(rng.choice(n_out, n, replace=False))
    shared = [m for m in MEASURES if m in in_measures and m in out_measures]
    combined = {
        m: np.concatenate([np.asarray(in_measures[m])[keep_in], np.asarray(out_measures[m])[keep_out]])
        for m in shared
    }
    positives = np.r_[np.zeros(keep_in.size, bool), np.ones(keep_out.size, bool)]
    report = DetectionReport("ood", _metrics(combined, positives))
    report.n_positive = int(keep_out.size)
    report.n_negative = int(keep_in.size)
    return report
