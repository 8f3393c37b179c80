"""scikit-learn compatible front-ends.

:class:`OpenWorldSSLClassifier` trains the widened-head pseudo-labeling
model (optionally with the batch-mean entropy regularizer and the collapse
guard).  :class:`ThresholdKMeansAdapter` wraps an already fitted classifier
and turns its seen-class predictions into open-world ones.

Unlabeled examples follow scikit-learn's semi-supervised convention and
carry the label ``-1``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .adaptation import DEFAULT_GRID, adapt_predictions, optimal_threshold_search, seen_confidence
from .backbone import ModelConfig, SSLTrainer, TrainConfig
from .collapse import GuardConfig, guard_training
from .errors import InvalidArgumentError
from .metrics import (combined_score, reject_scores_from_probs, seen_accuracy,
                      unseen_accuracy)
from .scenario import ClassPartition

UNLABELED = -1


def _check_X(X):
    return check_array(X, allow_nd=True, dtype=np.float32)


def check_semi_supervised(X, y, n_classes):
    """Validate ``(X, y)`` with ``-1`` marking unlabeled rows."""
    X = _check_X(X)
    y = column_or_1d(np.asarray(y), warn=True).astype(np.int64)
    if len(X) != len(y):
        raise InvalidArgumentError(f"X has {len(X)} rows but y has {len(y)}")
    labeled = y != UNLABELED
    if not labeled.any():
        raise InvalidArgumentError("at least one labeled example is required")
    if labeled.all():
        raise InvalidArgumentError("at least one unlabeled example (y == -1) is required")
    if y[labeled].min() < 0 or y[labeled].max() >= n_classes:
        raise InvalidArgumentError(f"labels must lie in [0, {n_classes}) or equal -1")
    return X, y, labeled


class OpenWorldSSLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Pseudo-labeling SSL classifier whose head covers seen and unseen classes.

    Parameters
    ----------
    n_classes : int
        Total number of classes, including those with no labeled example.
    regularizer : {"uniform", "prior", "off"}
        Batch-mean regularizer added to the SSL loss.  ``"off"`` trains the
        plain backbone.
    lam : float
        Weight of the regularizer.
    prior : array-like, optional
        Class-frequency prior, required for ``regularizer="prior"``.
    guard : bool
        Run the entropy-collapse guard and roll back on detection.

    Attributes
    ----------
    partition_ : ClassPartition
        Seen classes are those present in the labeled part of ``y``.
    stop_report_ : StopReport or None
    guard_trace_ : list of (epoch, value)
        The per-epoch series the guard monitored.
    history_ : list of dict
        Per-epoch loss averages.
    """

    def __init__(self, n_classes=None, regularizer="uniform", lam=1.5, prior=None,
                 threshold=0.95, batch_size=64, uratio=7, lr=0.03, momentum=0.9,
                 weight_decay=5e-4, max_epochs=60, model="mlp", hidden=128, feature_dim=64,
                 guard=True, gradient_threshold=0.1, smoothing_window=5, rollback_offset=5,
                 warmup_epochs=10, augment=None, checkpoint_dir=None, random_state=0):
        self.n_classes = n_classes
        self.regularizer = regularizer
        self.lam = lam
        self.prior = prior
        self.threshold = threshold
        self.batch_size = batch_size
        self.uratio = uratio
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.model = model
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.guard = guard
        self.gradient_threshold = gradient_threshold
        self.smoothing_window = smoothing_window
        self.rollback_offset = rollback_offset
        self.warmup_epochs = warmup_epochs
        self.augment = augment
        self.checkpoint_dir = checkpoint_dir
        self.random_state = random_state

    def _configs(self):
        train = TrainConfig(batch_size=self.batch_size, uratio=self.uratio, lr=self.lr,
                            momentum=self.momentum, weight_decay=self.weight_decay,
                            max_epochs=self.max_epochs, threshold=self.threshold, lam=self.lam,
                            regularizer=self.regularizer, seed=int(self.random_state or 0))
        model = ModelConfig(family=self.model, hidden=self.hidden, feature_dim=self.feature_dim)
        guard = GuardConfig(self.gradient_threshold, self.smoothing_window, self.rollback_offset,
                            self.warmup_epochs)
        return train, model, guard

    def fit(self, X, y, trace_hook=None, on_epoch=None):
        if self.n_classes is None:
            raise InvalidArgumentError("n_classes must be given: unseen classes cannot be inferred from y")
        X, y, labeled = check_semi_supervised(X, y, self.n_classes)
        train_cfg, model_cfg, guard_cfg = self._configs()
        self.partition_ = ClassPartition.from_seen(self.n_classes, np.unique(y[labeled]))
        self.classes_ = np.arange(self.n_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        trainer = SSLTrainer(X[labeled], y[labeled], X[~labeled], self.n_classes, train_cfg,
                             model_cfg, prior=self.prior, augment=self.augment,
                             checkpoint_dir=self.checkpoint_dir)
        if self.guard:
            trainer, self.stop_report_, self.guard_trace_ = guard_training(
                trainer, guard_cfg, trace_hook=trace_hook, on_epoch=on_epoch)
        else:
            self.stop_report_ = None
            self.guard_trace_ = []
            for _ in range(train_cfg.max_epochs):
                result = trainer.run_epoch()
                self.guard_trace_.append((trainer.epoch, result.entropy))
                if on_epoch is not None:
                    on_epoch(trainer, result)
        trainer.checkpoints.clear()
        self.trainer_ = trainer
        self.history_ = trainer.history
        return self

    def predict_batch(self, X):
        check_is_fitted(self, "trainer_")
        return self.trainer_.predict(_check_X(X))

    def predict_proba(self, X):
        return self.predict_batch(X).probs

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]

    def transform(self, X):
        """Penultimate-layer features."""
        return self.predict_batch(X).features

    def reject_score(self, X):
        return reject_scores_from_probs(self.predict_proba(X), self.partition_)

    def score(self, X, y, sample_weight=None):
        """Combined open-world score (class-count weighted seen/unseen accuracy)."""
        y = np.asarray(y)
        return _combined(self.predict(X), y, self.partition_)


class ThresholdKMeansAdapter(ClassifierMixin, BaseEstimator):
    """Reject-and-cluster adaptation of a fitted seen-class classifier.

    ``estimator`` must already be fitted and expose ``predict_proba``,
    ``transform`` (features) and ``partition_``.  ``fit`` only chooses the
    rejection threshold; with ``threshold="optimal"`` it searches ``grid``
    using the ground-truth labels it is given, which is how the baseline is
    given its best possible operating point.
    """

    def __init__(self, estimator, threshold="optimal", grid=None, random_state=0):
        self.estimator = estimator
        self.threshold = threshold
        self.grid = grid
        self.random_state = random_state

    def fit(self, X, y):
        check_is_fitted(self.estimator, "partition_")
        self.partition_ = self.estimator.partition_
        self.classes_ = self.estimator.classes_
        if self.threshold == "optimal":
            pb = self.estimator.predict_batch(X)
            grid = DEFAULT_GRID if self.grid is None else self.grid
            self.threshold_, self.best_score_, self.grid_scores_ = optimal_threshold_search(
                pb.probs, pb.features, np.asarray(y), self.partition_, grid, seed=self.random_state)
        else:
            self.threshold_ = float(self.threshold)
        return self

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        pb = self.estimator.predict_batch(X)
        preds, _ = adapt_predictions(pb.probs, pb.features, self.partition_, self.threshold_,
                                     seed=self.random_state)
        return preds

    def reject_score(self, X):
        conf, _ = seen_confidence(self.estimator.predict_proba(X), self.partition_)
        return 1.0 - conf

    def score(self, X, y, sample_weight=None):
        return _combined(self.predict(X), np.asarray(y), self.partition_)


def _combined(preds, y, partition):
    a_s = seen_accuracy(preds, y, partition)
    a_u = unseen_accuracy(preds, y, partition) if partition.n_unseen else 0.0
    return combined_score(a_s, a_u, partition)
