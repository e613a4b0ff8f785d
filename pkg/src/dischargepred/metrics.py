"""ROC / interpolated PR, Brier score, reliability table and subgroup reports.

One classification rule everywhere: an example is called positive iff
``score >= t``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MIN_GROUP_SIZE = 50


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    groups: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if len(s) != len(y):
            raise DataError(f"scores ({len(s)}) and labels ({len(y)}) differ in length")
        if not np.all(np.isfinite(s)):
            raise DataError("scores must be finite")
        if not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0/1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))
        if self.groups is not None:
            g = np.asarray(self.groups).ravel()
            if len(g) != len(s):
                raise DataError("groups must align with scores")
            object.__setattr__(self, "groups", g)

    def __len__(self):
        return len(self.scores)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos


def as_scored(scored, labels=None) -> ScoredSet:
    if isinstance(scored, ScoredSet):
        return scored
    if labels is None:
        raise TypeError("labels are required when scores are passed as an array")
    return ScoredSet(scored, labels)


@dataclass(frozen=True)
class RocCurve:
    """Operating points at thresholds +inf, each distinct score (descending), -inf."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg

    def __len__(self):
        return len(self.thresholds)


def _counts_at_distinct(scored: ScoredSet):
    """Distinct scores descending with cumulative TP/FP counts for ``score >= t``."""
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def roc_points(scored, labels=None) -> RocCurve:
    scored = as_scored(scored, labels)
    if scored.n_pos == 0 or scored.n_neg == 0:
        missing = "positive" if scored.n_pos == 0 else "negative"
        raise DataError(f"ROC needs both classes; no {missing} examples")
    thr, tp, fp = _counts_at_distinct(scored)
    return RocCurve(
        thresholds=np.r_[np.inf, thr, -np.inf],
        tp=np.r_[0, tp, scored.n_pos].astype(np.int64),
        fp=np.r_[0, fp, scored.n_neg].astype(np.int64),
        n_pos=scored.n_pos,
        n_neg=scored.n_neg,
    )


def auroc(scored, labels=None) -> float:
    """Trapezoidal area under the ROC curve (ties count one half)."""
    roc = roc_points(scored, labels)
    # integer trapezoid sum, one division at the end
    twice_area = int(np.sum(np.diff(roc.fp) * (roc.tp[1:] + roc.tp[:-1])))
    return twice_area / (2 * roc.n_pos * roc.n_neg)


def pr_points(scored, labels=None):
    """(thresholds, recall, precision) at each distinct score, descending."""
    scored = as_scored(scored, labels)
    if scored.n_pos == 0:
        raise DataError("precision-recall needs at least one positive example")
    thr, tp, fp = _counts_at_distinct(scored)
    return thr, tp / scored.n_pos, tp / (tp + fp)


def auprc_interpolated(scored, labels=None) -> float:
    """Step area under the interpolated PR curve.

    p_interp(r) is the best precision at any operating point with recall >= r;
    the area sums p_interp over the distinct recall levels above 0.
    """
    _, recall, precision = pr_points(scored, labels)
    # points are ordered by non-decreasing recall; a suffix max gives p_interp
    p_interp = np.maximum.accumulate(precision[::-1])[::-1]
    levels, first = np.unique(recall, return_index=True)
    widths = np.diff(np.r_[0.0, levels])
    return float(np.sum(widths * p_interp[first]))


def average_precision(scored, labels=None) -> float:
    """Uninterpolated AP: sum of (recall step) x precision at that step."""
    _, recall, precision = pr_points(scored, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def brier(scored, labels=None) -> float:
    scored = as_scored(scored, labels)
    if len(scored) == 0:
        raise DataError("Brier score of an empty set")
    return float(np.mean((scored.scores - scored.labels) ** 2))


@dataclass(frozen=True)
class CalibrationBin:
    low: float
    high: float
    count: int
    mean_pred: float
    frac_pos: float

    @property
    def empty(self) -> bool:
        return self.count == 0


def calibration_table(scored, labels=None, n_bins: int = 10):
    """Equal-width bins on [0, 1]; bins are [lo, hi) except the last, which is closed."""
    scored = as_scored(scored, labels)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    b = np.clip(np.searchsorted(edges, scored.scores, side="right") - 1, 0, n_bins - 1)
    cnt = np.bincount(b, minlength=n_bins)
    sp = np.bincount(b, weights=scored.scores, minlength=n_bins)
    sy = np.bincount(b, weights=scored.labels.astype(np.float64), minlength=n_bins)
    out = []
    for i in range(n_bins):
        c = int(cnt[i])
        out.append(CalibrationBin(float(edges[i]), float(edges[i + 1]), c,
                                  sp[i] / c if c else math.nan, sy[i] / c if c else math.nan))
    return out


def metrics_by_group(scored, labels=None, groups=None, min_size: int = MIN_GROUP_SIZE) -> dict:
    """Per-group AUROC/AUPRC; small or single-class groups get ``defined: False``."""
    scored = as_scored(scored, labels)
    g = scored.groups if groups is None else np.asarray(groups)
    if g is None:
        raise DataError("metrics_by_group needs group tokens")
    out = {}
    for name in sorted(set(g.tolist()), key=str):
        sel = g == name
        sub = ScoredSet(scored.scores[sel], scored.labels[sel])
        row = {"n": len(sub), "prevalence": float(sub.labels.mean()), "auroc": None, "auprc": None,
               "defined": False, "reason": None}
        if len(sub) < min_size:
            row["reason"] = f"fewer than {min_size} examples"
        elif sub.n_pos == 0 or sub.n_neg == 0:
            row["reason"] = "single class"
        else:
            row.update(auroc=auroc(sub), auprc=auprc_interpolated(sub), defined=True)
        out[str(name)] = row
    return out


def summary(scored, labels=None) -> dict:
    scored = as_scored(scored, labels)
    out = {
        "n": len(scored),
        "prevalence": float(scored.labels.mean()),
        "auroc": auroc(scored),
        "auprc": auprc_interpolated(scored),
        "average_precision": average_precision(scored),
        "brier": brier(scored),
    }
    if scored.groups is not None:
        out["groups"] = metrics_by_group(scored)
    return out


def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_metrics(out_dir, scored, extra: dict | None = None, n_bins: int = 10) -> dict:
    """Write roc.csv, pr.csv, calibration.csv and metrics.json; returns the metrics dict."""
    scored = as_scored(scored)
    out = Path(out_dir)
    roc = roc_points(scored)
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow([_fmt(t), _fmt(f), _fmt(r)])
    thr, rec, prec = pr_points(scored)
    with open(out / "pr.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "recall", "precision"])
        for t, r, p in zip(thr, rec, prec):
            w.writerow([_fmt(t), _fmt(r), _fmt(p)])
    with open(out / "calibration.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count", "mean_pred", "frac_pos"])
        for b in calibration_table(scored, n_bins=n_bins):
            w.writerow([_fmt(b.low), _fmt(b.high), b.count, _fmt(b.mean_pred), _fmt(b.frac_pos)])
    result = summary(scored)
    if extra:
        result.update(extra)
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result
