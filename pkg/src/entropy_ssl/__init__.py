"""Open-world semi-supervised learning with a batch-mean entropy regularizer."""

from .adaptation import (adapt_predictions, assemble_open_prediction, kmeans_cluster,
                         optimal_threshold_search, reject_by_confidence)
from .backbone import (CurriculumState, ModelConfig, PredictionBatch, SSLTrainer, TrainConfig,
                       forward, supervised_loss, train_epoch, unsupervised_loss)
from .collapse import GuardConfig, StopReport, detect_sharp_decline, guard_training, select_stop_epoch
from .estimators import OpenWorldSSLClassifier, ThresholdKMeansAdapter
from .metrics import (EvalReport, auroc, best_permutation_match, closed_accuracy, combined_score,
                      evaluate, seen_accuracy, unknown_accuracy, unseen_accuracy)
from .regularizer import (LossBreakdown, batch_mean_prediction, combine_losses,
                          prior_kl_regularizer, uniform_entropy_regularizer)
from .scenario import (ClassPartition, DatasetBundle, LabeledDataset, build_balanced_fewshot,
                       build_budget_labeled, make_synthetic_blobs, split_classes,
                       split_classes_by_superclass)

__version__ = "0.1.0"
