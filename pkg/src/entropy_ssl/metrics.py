"""Open-world and open-set evaluation scores.

Predictions are integer labels.  Any label outside ``partition.seen`` counts
as an "unseen" prediction: either a head slot of an unseen class or a
cluster id produced by the baseline adaptation.  Unseen predictions are
matched to the true unseen classes by an optimal one-to-one assignment
before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import roc_auc_score

from .errors import InvalidArgumentError, UndefinedScoreError
from .scenario import ClassPartition


@dataclass
class EvalReport:
    acc_seen: float
    acc_unseen: float
    combined: float
    closed_acc: float
    unknown_acc: float
    auroc: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _optimal_value(table: np.ndarray) -> float:
    r, c = linear_sum_assignment(table, maximize=True)
    return table[r, c].sum()


def best_permutation_match(table):
    """Maximum-weight one-to-one matching of table rows (predicted ids) to columns (classes).

    Non-square tables are zero-padded.  Among optimal matchings the
    lexicographically smallest row->column mapping is returned, so results do
    not depend on solver internals.

    Returns ``(mapping, matched_count)`` where ``mapping`` only contains real
    rows matched to real columns.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise InvalidArgumentError("contingency table must be a non-empty 2-D array")
    n_rows, n_cols = table.shape
    n = max(n_rows, n_cols)
    square = np.zeros((n, n))
    square[:n_rows, :n_cols] = table
    best = _optimal_value(square)
    tol = 1e-9 * max(1.0, abs(best))

    rows_left, cols_left = list(range(n)), list(range(n))
    mapping, acc = {}, 0.0
    for r in range(n):
        rows_left.remove(r)
        for c in cols_left:
            rest_cols = [cc for cc in cols_left if cc != c]
            rest = _optimal_value(square[np.ix_(rows_left, rest_cols)]) if rows_left else 0.0
            if acc + square[r, c] + rest >= best - tol:
                acc += square[r, c]
                cols_left.remove(c)
                if r < n_rows and c < n_cols:
                    mapping[r] = c
                break
    matched = sum(table[r, c] for r, c in mapping.items())
    if np.all(table == np.round(table)):
        matched = int(round(matched))
    return mapping, matched


def _subset(preds, truths, classes):
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.shape != truths.shape:
        raise InvalidArgumentError("predictions and truths differ in shape")
    keep = np.isin(truths, classes)
    return preds[keep], truths[keep]


def seen_accuracy(preds, truths, partition: ClassPartition) -> float:
    p, t = _subset(preds, truths, partition.seen)
    if len(t) == 0:
        raise UndefinedScoreError("no test points from seen classes")
    return float(np.mean(p == t))


def unseen_matching(preds, truths, partition: ClassPartition):
    """Match unseen predictions to unseen classes; returns ``(mapping, correct, n_points)``."""
    p, t = _subset(preds, truths, partition.unseen)
    if len(t) == 0:
        raise UndefinedScoreError("no test points from unseen classes")
    rejected = ~np.isin(p, partition.seen)
    pred_ids = np.unique(p[rejected])
    if len(pred_ids) == 0:
        return {}, 0, len(t)
    classes = np.sort(np.asarray(partition.unseen))
    table = np.zeros((len(pred_ids), len(classes)), dtype=np.int64)
    np.add.at(table, (np.searchsorted(pred_ids, p[rejected]), np.searchsorted(classes, t[rejected])), 1)
    idx_map, correct = best_permutation_match(table)
    mapping = {int(pred_ids[r]): int(classes[c]) for r, c in idx_map.items()}
    return mapping, int(correct), len(t)


def unseen_accuracy(preds, truths, partition: ClassPartition) -> float:
    _, correct, n = unseen_matching(preds, truths, partition)
    return correct / n


def combined_score(acc_seen: float, acc_unseen: float, partition: ClassPartition) -> float:
    n = partition.n_classes
    return partition.n_seen / n * acc_seen + partition.n_unseen / n * acc_unseen


def closed_accuracy(probs, truths, partition: ClassPartition) -> float:
    """Accuracy on seen-class points when the argmax is restricted to seen slots."""
    probs = np.asarray(probs)
    truths = np.asarray(truths)
    seen = np.asarray(partition.seen)
    keep = np.isin(truths, seen)
    if not keep.any():
        raise UndefinedScoreError("no test points from seen classes")
    pred = seen[np.argmax(probs[keep][:, seen], axis=1)]
    return float(np.mean(pred == truths[keep]))


def unknown_accuracy(preds, truths, partition: ClassPartition) -> float:
    """Fraction of unseen-class points given any unseen label."""
    p, t = _subset(preds, truths, partition.unseen)
    if len(t) == 0:
        raise UndefinedScoreError("no test points from unseen classes")
    return float(np.mean(~np.isin(p, partition.seen)))


def auroc(reject_scores, is_unseen) -> float:
    """Area under the ROC curve of the seen-vs-unseen reject score (ties count one half)."""
    is_unseen = np.asarray(is_unseen, dtype=bool)
    if is_unseen.all() or not is_unseen.any():
        raise UndefinedScoreError("AUROC needs both seen and unseen points")
    return float(roc_auc_score(is_unseen, np.asarray(reject_scores, dtype=np.float64)))


def reject_scores_from_probs(probs, partition: ClassPartition, renormalize=False) -> np.ndarray:
    """``1 - max seen-class probability``; optionally renormalised over seen slots."""
    probs = np.asarray(probs, dtype=np.float64)
    seen_p = probs[:, list(partition.seen)]
    if renormalize:
        seen_p = seen_p / np.clip(seen_p.sum(axis=1, keepdims=True), 1e-300, None)
    return 1.0 - seen_p.max(axis=1)


def evaluate(preds, probs, truths, partition: ClassPartition, reject_scores=None) -> EvalReport:
    """All six scores for one prediction set.

    ``reject_scores`` defaults to :func:`reject_scores_from_probs` on ``probs``.
    """
    truths = np.asarray(truths)
    if reject_scores is None:
        reject_scores = reject_scores_from_probs(probs, partition)
    a_s = seen_accuracy(preds, truths, partition)
    a_u = unseen_accuracy(preds, truths, partition)
    return EvalReport(
        acc_seen=a_s,
        acc_unseen=a_u,
        combined=combined_score(a_s, a_u, partition),
        closed_acc=closed_accuracy(probs, truths, partition),
        unknown_acc=unknown_accuracy(preds, truths, partition),
        auroc=auroc(reject_scores, ~partition.seen_mask(truths)),
    )
