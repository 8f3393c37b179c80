"""Turn a seen-class classifier into an open-world one.

Points whose (seen-renormalised) softmax confidence falls below a threshold
are rejected; rejected points are partitioned by K-means in feature space
into ``n_unseen`` clusters.  Cluster ``j`` is emitted as label
``n_classes + j`` so it can never collide with a head slot; evaluation
matches clusters to unseen classes by best permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InternalConsistencyError, InvalidArgumentError
from .metrics import combined_score, seen_accuracy, unseen_accuracy
from .scenario import ClassPartition

DEFAULT_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass
class RejectDecision:
    accepted: np.ndarray  # bool per example
    seen_prediction: np.ndarray  # class id in partition.seen
    confidence: np.ndarray  # max renormalised seen probability

    def __len__(self):
        return len(self.accepted)


def seen_confidence(probs, partition: ClassPartition):
    """``(confidence, seen_prediction)`` with probabilities renormalised over seen slots."""
    probs = np.asarray(probs, dtype=np.float64)
    if partition.n_seen == 0:
        raise InvalidArgumentError("partition has no seen classes")
    seen = np.asarray(partition.seen)
    p = probs[:, seen]
    p = p / np.clip(p.sum(axis=1, keepdims=True), 1e-300, None)
    arg = p.argmax(axis=1)
    return p[np.arange(len(p)), arg], seen[arg]


def reject_by_confidence(probs, partition: ClassPartition, threshold: float) -> RejectDecision:
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgumentError(f"threshold must lie in [0, 1], got {threshold}")
    conf, pred = seen_confidence(probs, partition)
    return RejectDecision(conf >= threshold, pred, conf)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list
    n_iter: int


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def farthest_point_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random first centre, then repeatedly the point farthest from all chosen centres."""
    centers = [X[rng.integers(len(X))]]
    d = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        i = int(np.argmax(d))
        centers.append(X[i])
        d = np.minimum(d, ((X - X[i]) ** 2).sum(1))
    return np.array(centers, dtype=np.float64)


def kmeans_cluster(features, k: int, seed=None, max_iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm from a seeded farthest-point start.

    Ties in assignment go to the lowest cluster index; an emptied cluster
    keeps its previous centre.  Stops when assignments no longer change.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgumentError("features must be a 2-D array")
    if k < 1 or len(X) < k:
        raise InvalidArgumentError(f"need at least k={k} points, got {len(X)}")
    centroids = farthest_point_init(X, k, np.random.default_rng(seed))
    labels = np.full(len(X), -1)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d = _sq_dists(X, centroids)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(X)), new_labels].sum()))
        if len(history) > 1 and history[-1] > history[-2] * (1 + 1e-12) + 1e-12:
            raise InternalConsistencyError("K-means inertia increased")
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = X[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return ClusterAssignment(labels, centroids, history, n_iter)


def assemble_open_prediction(decisions: RejectDecision, clusters: ClusterAssignment | None,
                             partition: ClassPartition, rejected_idx=None) -> np.ndarray:
    """Accepted points keep their seen prediction; rejected points get ``n_classes + cluster``."""
    n = len(decisions)
    if rejected_idx is None:
        rejected_idx = np.flatnonzero(~decisions.accepted)
    rejected_idx = np.asarray(rejected_idx)
    if not np.array_equal(np.sort(rejected_idx), np.flatnonzero(~decisions.accepted)):
        raise InternalConsistencyError("cluster coverage does not match rejected points")
    n_clustered = 0 if clusters is None else len(clusters.labels)
    if n_clustered != len(rejected_idx):
        raise InternalConsistencyError(
            f"{len(rejected_idx)} rejected points but {n_clustered} cluster labels")
    out = decisions.seen_prediction.astype(np.int64).copy()
    if n_clustered:
        out[rejected_idx] = partition.n_classes + clusters.labels
    assert out.shape == (n,)
    return out


def adapt_predictions(probs, features, partition: ClassPartition, threshold: float,
                      seed=None, n_clusters=None):
    """Reject -> K-means -> assemble.  Returns ``(labels, decisions)``."""
    decisions = reject_by_confidence(probs, partition, threshold)
    rejected = np.flatnonzero(~decisions.accepted)
    k = partition.n_unseen if n_clusters is None else n_clusters
    clusters = None
    if len(rejected) and k > 0:
        k_eff = min(k, len(rejected))
        clusters = kmeans_cluster(np.asarray(features)[rejected], k_eff, seed=seed)
    elif len(rejected):
        # nothing to discover: rejected points fall back to their seen prediction
        decisions = RejectDecision(np.ones(len(decisions), bool), decisions.seen_prediction,
                                   decisions.confidence)
        rejected = rejected[:0]
    return assemble_open_prediction(decisions, clusters, partition, rejected), decisions


def pipeline_score(probs, features, truths, partition, threshold, seed=None) -> float:
    preds, _ = adapt_predictions(probs, features, partition, threshold, seed)
    a_s = seen_accuracy(preds, truths, partition)
    a_u = unseen_accuracy(preds, truths, partition)
    return combined_score(a_s, a_u, partition)


def optimal_threshold_search(probs, features, truths, partition: ClassPartition,
                             grid=DEFAULT_GRID, seed=None):
    """Grid search for the threshold maximising the combined score (uses ground truth).

    Ties resolve to the smaller threshold.  Returns ``(threshold, score, scores)``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or grid.min() < 0 or grid.max() > 1:
        raise InvalidArgumentError("threshold grid must be non-empty within [0, 1]")
    grid = np.unique(grid)
    conf, _ = seen_confidence(probs, partition)
    cache: dict[bytes, float] = {}
    scores = []
    for t in grid:
        key = np.packbits(conf >= t).tobytes()
        if key not in cache:
            cache[key] = pipeline_score(probs, features, truths, partition, t, seed)
        scores.append(cache[key])
    scores = np.array(scores)
    best = int(np.argmax(scores))  # first maximum = smallest threshold
    return float(grid[best]), float(scores[best]), scores
