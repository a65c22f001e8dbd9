"""Ranking and thresholded classification metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THRESHOLDS = (0.2, 0.5, 0.8)


class UndefinedMetricError(ValueError):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def _tie_groups(s, y):
    """Descending-score groups: (positives, negatives) per distinct score."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    bounds = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], bounds])
    pos = np.add.reduceat(y, starts) if len(s) else np.zeros(0, np.int64)
    cnt = np.diff(np.concatenate([starts, [len(s)]]))
    return pos, cnt - pos


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), via one sorted sweep over tie groups."""
    s, y = _prep(scores, labels)
    P, N = int(y.sum()), int(len(y) - y.sum())
    if P == 0 or N == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    pos, neg = _tie_groups(s, y)
    neg_above = np.concatenate([[0], np.cumsum(neg)[:-1]])
    # each positive beats every negative in lower groups, ties count half
    wins = pos * (N - neg_above - neg) + 0.5 * pos * neg
    return float(wins.sum() / (P * N))


def auprc(scores, labels) -> float:
    """Average precision: sum over tie groups of (recall gained) x (precision after the group)."""
    s, y = _prep(scores, labels)
    P = int(y.sum())
    if P == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    pos, neg = _tie_groups(s, y)
    tp = np.cumsum(pos)
    seen = np.cumsum(pos + neg)
    return float(np.sum(pos / P * tp / seen))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s, y = _prep(scores, labels)
    pos, neg = _tie_groups(s, y)
    P, N = max(pos.sum(), 1), max(neg.sum(), 1)
    tpr = np.concatenate([[0.0], np.cumsum(pos) / P])
    fpr = np.concatenate([[0.0], np.cumsum(neg) / N])
    return fpr, tpr


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at each tie-group boundary."""
    s, y = _prep(scores, labels)
    pos, neg = _tie_groups(s, y)
    tp = np.cumsum(pos)
    return tp / max(pos.sum(), 1), tp / np.cumsum(pos + neg)


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def _ratio(a, b):
        return a / b if b else None

    @property
    def ppv(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def sensitivity(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return self._ratio(self.tn, self.tn + self.fp)


def confusion(scores, labels, threshold: float) -> Confusion:
    s, y = _prep(scores, labels)
    pred = s >= threshold
    return Confusion(
        tp=int(np.sum(pred & (y == 1))),
        fp=int(np.sum(pred & (y == 0))),
        tn=int(np.sum(~pred & (y == 0))),
        fn=int(np.sum(~pred & (y == 1))),
    )


def coefficient_of_variation(values) -> float:
    """100 * population std / mean."""
    v = np.asarray(values, dtype=np.float64)
    m = v.mean()
    if m == 0:
        raise UndefinedMetricError("coefficient of variation undefined for zero mean")
    return float(100.0 * v.std() / m)


def threshold_metrics(scores, labels, thresholds=THRESHOLDS) -> dict:
    """PPV / sensitivity / specificity per threshold plus their CV% across thresholds.

    A metric with an empty denominator is None at that threshold, and is
    left out of its CV (listed under ``cv_excluded``).
    """
    if any(not 0.0 < t < 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1)")
    per = {}
    for t in thresholds:
        c = confusion(scores, labels, t)
        per[t] = {"ppv": c.ppv, "sensitivity": c.sensitivity, "specificity": c.specificity,
                  "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}
    cv, excluded = {}, {}
    for name in ("ppv", "sensitivity", "specificity"):
        vals = [per[t][name] for t in thresholds]
        missing = [t for t, v in zip(thresholds, vals) if v is None]
        present = [v for v in vals if v is not None]
        if missing:
            excluded[name] = missing
        try:
            cv[name] = coefficient_of_variation(present) if present else None
        except UndefinedMetricError:
            cv[name] = None
    return {"thresholds": list(thresholds), "per_threshold": per, "cv": cv, "cv_excluded": excluded}


def summarize(scores, labels, thresholds=THRESHOLDS) -> dict:
    """Flat metric dict used by the CV reports."""
    out = {"auroc": auroc(scores, labels), "auprc": auprc(scores, labels)}
    tm = threshold_metrics(scores, labels, thresholds)
    for t in thresholds:
        for name in ("ppv", "sensitivity", "specificity"):
            out[f"{name}@{t}"] = tm["per_threshold"][t][name]
    for name, v in tm["cv"].items():
        out[f"cv_{name}"] = v
    return out
