"""Threshold-free verification metrics: ROC AUC and equal error rate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import EASY, HARD
from .errors import MetricError

CSV_COLUMNS = ("subset", "auc", "eer", "threshold", "n_pos", "n_neg")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    difficulty: tuple | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise MetricError(f"{len(self.scores)} scores vs {len(self.labels)} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise MetricError("labels must be 0 or 1")
        if self.difficulty is not None:
            self.difficulty = tuple(self.difficulty)
            if len(self.difficulty) != len(self.scores):
                raise MetricError("difficulty tags must match the scores in length")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(len(self.labels) - self.labels.sum())

    def _check(self):
        if self.n_pos == 0 or self.n_neg == 0:
            raise MetricError(f"need positives and negatives, got {self.n_pos} and {self.n_neg}")

    def subset(self, difficulty: str) -> "ScoredSet":
        """All positives plus the negatives tagged ``difficulty``."""
        if self.difficulty is None:
            raise MetricError("set carries no difficulty tags")
        keep = np.array([y == 1 or d == difficulty for y, d in zip(self.labels, self.difficulty)], dtype=bool)
        return ScoredSet(self.scores[keep], self.labels[keep], tuple(np.array(self.difficulty, dtype=object)[keep]))


def _as_set(s, labels=None) -> ScoredSet:
    return s if isinstance(s, ScoredSet) else ScoredSet(s, labels)


def auc(s, labels=None) -> float:
    """Mann-Whitney AUC from mid-ranks; ties count one half."""
    s = _as_set(s, labels)
    s._check()
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    ranks = np.empty(len(order))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos, n_neg = s.n_pos, s.n_neg
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def eer(s, labels=None) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Operating points are taken at every distinct score with the rule
    "accept if score >= t". Between the last point where the false-reject
    rate is below the false-accept rate and the next one, both rates are
    interpolated linearly and the crossing is reported.
    """
    s = _as_set(s, labels)
    s._check()
    pos = np.sort(s.scores[s.labels == 1])
    neg = np.sort(s.scores[s.labels == 0])
    ts = np.unique(s.scores)
    ts = np.concatenate([ts, [np.inf]])
    far = 1.0 - np.searchsorted(neg, ts, side="left") / len(neg)
    frr = np.searchsorted(pos, ts, side="left") / len(pos)
    diff = far - frr
    if diff[0] <= 0:
        return float(far[0]), float(ts[0])
    k = int(np.flatnonzero(diff <= 0)[0])
    d0, d1 = diff[k - 1], diff[k]
    w = d0 / (d0 - d1)
    rate = far[k - 1] + w * (far[k] - far[k - 1])
    t1 = ts[k] if np.isfinite(ts[k]) else ts[k - 1]
    thr = ts[k - 1] + w * (t1 - ts[k - 1])
    return float(rate), float(thr)


@dataclass(frozen=True)
class SubsetMetrics:
    subset: str
    auc: float
    eer: float
    threshold: float
    n_pos: int
    n_neg: int


@dataclass
class MetricsReport:
    rows: dict

    def get(self, subset: str) -> SubsetMetrics | None:
        return self.rows.get(subset)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows.values():
            w.writerow([r.subset, repr(r.auc), repr(r.eer), repr(r.threshold), r.n_pos, r.n_neg])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise MetricError(f"unexpected CSV header {header}")
        rows = {}
        for rec in reader:
            if len(rec) != len(CSV_COLUMNS):
                raise MetricError(f"bad CSV row {rec}")
            rows[rec[0]] = SubsetMetrics(rec[0], float(rec[1]), float(rec[2]), float(rec[3]), int(rec[4]), int(rec[5]))
        return cls(rows)


def _metrics(name: str, s: ScoredSet) -> SubsetMetrics:
    rate, thr = eer(s)
    return SubsetMetrics(name, auc(s), rate, thr, s.n_pos, s.n_neg)


def report(s: ScoredSet, prefix: str = "") -> MetricsReport:
    """Overall metrics plus one row per difficulty subset with both classes.

    Subsets without negatives are left out rather than reported as zero.
    """
    rows = {}
    rows[prefix + "all"] = _metrics(prefix + "all", s)
    if s.difficulty is not None:
        for d in (EASY, HARD):
            sub = s.subset(d)
            if sub.n_pos and sub.n_neg:
                rows[prefix + d] = _metrics(prefix + d, sub)
    return MetricsReport(rows)


def merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    rows = {}
    for r in reports:
        rows.update(r.rows)
    return MetricsReport(rows)
