"""Clustering accuracy, NMI and pairwise F-measure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError
from .prototype import linear_assignment


def _check(pred, truth):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise InvalidArgumentError(f"length mismatch: {pred.size} vs {truth.size}")
    return pred, truth


def contingency(pred, truth):
    """Counts table (pred clusters x true classes) plus the label values."""
    pred, truth = _check(pred, truth)
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((p_vals.size, t_vals.size), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    return table, p_vals, t_vals


def accuracy(pred, truth):
    """Best agreement over one-to-one cluster -> class matchings.

    Returns ``(acc, matching)`` with ``matching`` a dict from predicted label
    to class label (clusters left unmatched when there are more clusters than
    classes are absent).
    """
    pred, truth = _check(pred, truth)
    if pred.size == 0:
        raise InvalidArgumentError("empty labelings")
    table, p_vals, t_vals = contingency(pred, truth)
    k = max(table.shape)
    square = np.zeros((k, k), dtype=np.int64)
    square[:table.shape[0], :table.shape[1]] = table
    cols = linear_assignment(-square)
    matched = square[np.arange(k), cols].sum()
    matching = {p_vals[r].item(): t_vals[c].item() for r, c in enumerate(cols)
                if r < p_vals.size and c < t_vals.size}
    return float(matched) / pred.size, matching


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Mutual information over the geometric mean of the two entropies."""
    table, _, _ = contingency(pred, truth)
    n = table.sum()
    hp = _entropy(table.sum(axis=1))
    ht = _entropy(table.sum(axis=0))
    if hp == 0.0 or ht == 0.0:
        # both constant means identical partitions
        return 1.0 if hp == ht else 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(min(max(mi / np.sqrt(hp * ht), 0.0), 1.0))


def _pairs(counts):
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def pair_counts(pred, truth):
    """(same-cluster-and-class, same-cluster, same-class) pair counts."""
    table, _, _ = contingency(pred, truth)
    return _pairs(table.ravel()), _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))


def fmeasure(pred, truth) -> float:
    """Pairwise F-measure over sample pairs grouped together.

    F is 0 when either labeling puts no two samples together (unless neither
    does, in which case the partitions agree and F is 1).
    """
    pred, truth = _check(pred, truth)
    if pred.size < 2:
        raise InvalidArgumentError("F-measure needs at least two samples")
    tp, n_pred, n_true = pair_counts(pred, truth)
    if n_pred == 0 or n_true == 0:
        return 1.0 if n_pred == n_true else 0.0
    precision = tp / n_pred
    recall = tp / n_true
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClusteringResult:
    predicted: np.ndarray
    truth: np.ndarray
    acc: float
    nmi: float
    fmeasure: float
    matching: dict

    def scores(self) -> dict:
        return {"acc": self.acc, "nmi": self.nmi, "fmeasure": self.fmeasure}


def evaluate(pred, truth) -> ClusteringResult:
    pred, truth = _check(pred, truth)
    acc, matching = accuracy(pred, truth)
    return ClusteringResult(pred, truth, acc, nmi(pred, truth), fmeasure(pred, truth), matching)
