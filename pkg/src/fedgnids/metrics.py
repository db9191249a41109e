"""Edge-level detection metrics.

Anomaly scores are oriented so that larger means more suspicious
(``1 - edge probability``); an edge is flagged when ``score >= tau``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ScoredEdges:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel().astype(np.int64)
        if s.shape != y.shape:
            raise ValueError(f"{len(s)} scores but {len(y)} labels")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0/1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    @classmethod
    def from_probabilities(cls, probs, labels) -> "ScoredEdges":
        return cls(1.0 - np.asarray(probs, dtype=np.float64), labels)

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos


def _as_scored(s, labels=None) -> ScoredEdges:
    return s if isinstance(s, ScoredEdges) else ScoredEdges(s, labels)


def pr_curve(s: ScoredEdges) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision/recall at each distinct score, thresholds descending."""
    order = np.argsort(-s.scores, kind="mergesort")
    scores = s.scores[order]
    labels = s.labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1 - labels)
    # last index of each tie group
    last = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / max(s.n_pos, 1)
    return scores[last], precision, recall


def average_precision(s, labels=None) -> float:
    """Step-wise ``sum_n (R_n - R_{n-1}) * P_n`` over distinct thresholds."""
    s = _as_scored(s, labels)
    if s.n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    _, precision, recall = pr_curve(s)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc(s, labels=None) -> float:
    """``P(score_pos > score_neg) + 0.5 * P(tie)`` from average ranks."""
    s = _as_scored(s, labels)
    if s.n_pos == 0 or s.n_neg == 0:
        raise ValueError("ROC AUC needs both classes")
    ranks = rankdata(s.scores)
    pos_rank_sum = ranks[s.labels == 1].sum()
    return float((pos_rank_sum - s.n_pos * (s.n_pos + 1) / 2) / (s.n_pos * s.n_neg))


class Threshold(NamedTuple):
    tau: float
    degenerate: bool = False


def _counts_at(s: ScoredEdges, tau: float) -> tuple[int, int, int, int]:
    flagged = s.scores >= tau
    tp = int(np.sum(flagged & (s.labels == 1)))
    fp = int(np.sum(flagged & (s.labels == 0)))
    return tp, fp, s.n_pos - tp, s.n_neg - fp


def select_threshold(validation, objective: str | tuple = "f1") -> Threshold:
    """Learn ``tau`` on validation scores.

    ``"f1"`` maximises F1 (smallest maximiser wins) and then moves ``tau`` to
    the midpoint of the gap below it, which flags exactly the same edges.
    ``("fpr_target", x)`` returns the smallest distinct score whose
    conventional FPR is at most ``x``.
    """
    s = _as_scored(validation)
    if s.n_pos == 0 or s.n_neg == 0:
        raise ValueError("threshold selection needs both classes")
    uniq = np.unique(s.scores)
    degenerate = len(uniq) == 1

    if objective == "f1":
        best_i, best_f1 = 0, -1.0
        for i, tau in enumerate(uniq):
            tp, fp, fn, _ = _counts_at(s, tau)
            f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
            if f1 > best_f1:
                best_i, best_f1 = i, f1
        tau = uniq[best_i]
        if best_i > 0:
            tau = 0.5 * (uniq[best_i - 1] + uniq[best_i])
        return Threshold(float(tau), degenerate)

    if isinstance(objective, tuple) and objective[0] == "fpr_target":
        x = float(objective[1])
        for tau in uniq:
            _, fp, _, tn = _counts_at(s, tau)
            if fp / (fp + tn) <= x:
                return Threshold(float(tau), degenerate)
        return Threshold(float(np.nextafter(uniq[-1], np.inf)), degenerate)
    raise ValueError(f"unknown objective {objective!r}")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    fpr_printed: float
    fpr_conventional: float
    precision_undefined: bool

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(s, tau: float, labels=None) -> Confusion:
    """Counts and rates at ``tau``.

    ``fpr_printed`` is ``FP / (TP + FP)`` (the same as ``1 - precision``),
    kept for tables that use that definition; ``fpr_conventional`` is
    ``FP / (FP + TN)``.  Undefined ratios are reported as 0.
    """
    s = _as_scored(s, labels)
    tp, fp, fn, tn = _counts_at(s, tau)
    flagged = tp + fp
    return Confusion(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        precision=tp / flagged if flagged else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        fpr_printed=fp / flagged if flagged else 0.0,
        fpr_conventional=fp / (fp + tn) if fp + tn else 0.0,
        precision_undefined=flagged == 0,
    )


def attack_success_rate(malicious_scores: Sequence[float], tau: float) -> float:
    """Fraction of malicious edges that slip under ``tau``."""
    scores = np.asarray(malicious_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no malicious edges to score")
    return float(np.mean(scores < tau))


def report(test: ScoredEdges, tau: float, *, sr: float | None = None, epm: float | None = None) -> dict:
    """The metrics JSON document (all values are fractions)."""
    c = confusion(test, tau)
    out = {
        "ap": average_precision(test),
        "auc": roc_auc(test),
        "precision": c.precision,
        "recall": c.recall,
        "fpr_printed": c.fpr_printed,
        "fpr_conventional": c.fpr_conventional,
        "tau": float(tau),
    }
    if sr is not None:
        out["sr"] = sr
    if epm is not None:
        out["epm"] = epm
    return out
