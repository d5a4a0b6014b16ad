"""Classification, calibration and OOD-detection metrics.

Conventions:

* predicted class is the row argmax, ties resolved to the lowest index;
* confidence is the max probability; ECE bin ``i`` of ``n_bins`` covers
  ``(i/n_bins, (i+1)/n_bins]`` and confidence 0 falls in bin 0;
* NLL floors the true-class probability at 1e-12;
* for OOD detection in-distribution samples are the positive class and a
  sample is flagged positive when its score is >= the threshold.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

NLL_FLOOR = 1e-12


def _check_labels(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],) or probs.shape[0] < 1:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} do not match")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise IndexError(f"label out of range [0, {probs.shape[1]})")
    return probs, labels


def accuracy(probs, labels):
    probs, labels = _check_labels(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def ece(probs, labels, n_bins=15):
    """Expected calibration error and the per-bin (count, mean_conf, mean_acc) table."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs, labels = _check_labels(probs, labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    n = conf.size
    total = 0.0
    table = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            table.append((0, 0.0, 0.0))
            continue
        mc = float(conf[mask].mean())
        ma = float(correct[mask].mean())
        total += count / n * abs(ma - mc)
        table.append((count, mc, ma))
    return float(total), table


def nll(probs, labels):
    probs, labels = _check_labels(probs, labels)
    p = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(p, NLL_FLOOR))))


def brier(probs, labels):
    probs, labels = _check_labels(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


@dataclass
class OodScores:
    in_dist_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.in_dist_scores = np.asarray(self.in_dist_scores, dtype=np.float64).ravel()
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if self.in_dist_scores.size == 0 or self.ood_scores.size == 0:
            raise ValueError("OOD metrics need non-empty in-distribution and OOD score sets")

    @classmethod
    def from_probs(cls, in_probs, ood_probs):
        """Max-softmax confidence as the in-distribution score."""
        return cls(np.max(in_probs, axis=1), np.max(ood_probs, axis=1))


def _roc_points(pos, neg):
    """(fpr, tpr, thresholds) at every distinct score, thresholds descending."""
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(is_pos[order])
    fp = np.cumsum(1.0 - is_pos[order])
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    return fp[last] / neg.size, tp[last] / pos.size, s[last], tp[last], fp[last]


def auroc(pos, neg):
    """Mann-Whitney statistic: P(pos > neg) + 0.5 P(pos == neg)."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="stable")
    ranks = np.empty(allv.size)
    sv = allv[order]
    # average ranks over tied groups
    starts = np.r_[0, np.flatnonzero(np.diff(sv) != 0) + 1]
    ends = np.r_[starts[1:], sv.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auprc(pos, neg):
    """Step-wise area: sum over distinct thresholds of (delta recall) * precision."""
    _, tpr, _, tp, fp = _roc_points(np.asarray(pos, float), np.asarray(neg, float))
    precision = tp / (tp + fp)
    recall_prev = np.r_[0.0, tpr[:-1]]
    return float(np.sum((tpr - recall_prev) * precision))


def fpr_at_tpr(pos, neg, target=0.95):
    """FPR at the largest threshold whose TPR reaches ``target``."""
    fpr, tpr, _, _, _ = _roc_points(np.asarray(pos, float), np.asarray(neg, float))
    k = int(np.flatnonzero(tpr >= target)[0])
    return float(fpr[k])


def ood_metrics(scores):
    pos, neg = scores.in_dist_scores, scores.ood_scores
    return auroc(pos, neg), auprc(pos, neg), fpr_at_tpr(pos, neg, 0.95)


@dataclass
class MetricsReport:
    accuracy: float
    ece: float
    nll: float
    brier: float
    n_bins: int = 15
    bin_table: list = field(default_factory=list)
    ood: dict | None = None

    def as_dict(self):
        return asdict(self)


def evaluate(probs, labels, n_bins=15, ood_probs=None):
    e, table = ece(probs, labels, n_bins)
    report = MetricsReport(accuracy(probs, labels), e, nll(probs, labels), brier(probs, labels),
                           n_bins, table)
    if ood_probs is not None:
        a, p, f = ood_metrics(OodScores.from_probs(probs, ood_probs))
        report.ood = {"auroc": a, "auprc": p, "fpr_at_95_tpr": f}
    return report
