"""Early stop on a sharp drop of the per-epoch prediction entropy.

When training collapses, predictions pile onto a few classes and the
entropy of the batch-mean prediction falls suddenly.  The guard smooths the
per-epoch trace with a trailing moving average, takes backward differences,
and flags the first epoch (after a warm-up) whose difference falls below
``-gradient_threshold``.  Training is then rolled back ``rollback_offset``
epochs to the checkpoint taken before the decline.

``monitor="entropy"`` watches the batch-mean entropy; ``monitor="le"``
watches the regularizer value itself (the negated entropy for the uniform
regularizer, so a collapse appears there as a rise, not a drop).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InsufficientDataError, InternalConsistencyError, InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass
class GuardConfig:
    gradient_threshold: float = 0.1
    smoothing_window: int = 5
    rollback_offset: int = 5
    warmup_epochs: int = 10
    monitor: str = "entropy"

    def __post_init__(self):
        if self.gradient_threshold <= 0:
            raise InvalidArgumentError("gradient_threshold must be positive")
        if self.smoothing_window < 1 or self.rollback_offset < 1:
            raise InvalidArgumentError("smoothing_window and rollback_offset must be >= 1")
        if self.warmup_epochs < 0:
            raise InvalidArgumentError("warmup_epochs must be >= 0")
        if self.monitor not in ("entropy", "le"):
            raise InvalidArgumentError("monitor must be 'entropy' or 'le'")


@dataclass
class StopReport:
    detected: bool
    decline_epoch: Optional[int]
    stop_epoch: int
    epochs_trained: int
    checkpoint_path: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _as_trace(trace):
    """Accept ``[(epoch, value), ...]`` or a plain value sequence indexed from 0."""
    trace = list(trace)
    if trace and isinstance(trace[0], (tuple, list)):
        epochs = np.array([int(e) for e, _ in trace])
        values = np.array([float(v) for _, v in trace])
    else:
        values = np.asarray(trace, dtype=np.float64)
        epochs = np.arange(len(values))
    if len(epochs) > 1 and np.any(np.diff(epochs) <= 0):
        raise InvalidArgumentError("trace epochs must be strictly increasing")
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("trace values must be finite")
    return epochs, values


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; entry ``i`` averages ``values[i-window+1 : i+1]``."""
    v = np.asarray(values, dtype=np.float64)
    return sliding_window_view(v, window).mean(axis=1)


def detect_sharp_decline(trace, cfg: GuardConfig) -> Optional[int]:
    """Epoch of the first smoothed one-step drop steeper than the threshold, else ``None``.

    Drops at epochs before ``cfg.warmup_epochs`` are ignored.
    """
    epochs, values = _as_trace(trace)
    w = cfg.smoothing_window
    if len(values) < w + 1:
        raise InsufficientDataError(f"trace needs at least {w + 1} epochs, has {len(values)}")
    # translation invariance: differences of the centred series
    s = smoothed(values - values[0], w)
    diffs = np.diff(s)
    # diffs[j] compares windows ending at positions w+j and w-1+j
    hits = np.flatnonzero((diffs < -cfg.gradient_threshold) & (epochs[w:] >= cfg.warmup_epochs))
    if len(hits) == 0:
        return None
    return int(epochs[w + hits[0]])


def select_stop_epoch(decline_epoch: int, cfg: GuardConfig) -> int:
    return max(int(decline_epoch) - cfg.rollback_offset, 0)


def guard_training(trainer, cfg: GuardConfig, max_epochs: int | None = None,
                   trace_hook: Callable[[int, float], float] | None = None,
                   on_epoch: Callable | None = None):
    """Train under the collapse guard.

    ``trainer`` must provide ``run_epoch()``, ``epoch``, ``load_checkpoint(e)``
    and ``load_state_dict(state)`` (see :class:`entropy_ssl.backbone.SSLTrainer`).
    ``trace_hook(epoch, value)`` may replace the monitored value, which is
    how faults are injected in tests.  Returns ``(trainer, StopReport, trace)``.
    """
    if max_epochs is None:
        max_epochs = trainer.cfg.max_epochs
    trace: list[tuple[int, float]] = []
    decline = None
    for _ in range(max_epochs):
        result = trainer.run_epoch()
        value = float(result.entropy if cfg.monitor == "entropy" else result.losses.le)
        if trace_hook is not None:
            value = float(trace_hook(trainer.epoch, value))
        trace.append((trainer.epoch, value))
        if on_epoch is not None:
            on_epoch(trainer, result)
        if len(trace) > cfg.smoothing_window:
            decline = detect_sharp_decline(trace, cfg)
            if decline is not None:
                break

    epochs_trained = len(trace)
    if decline is None:
        return trainer, StopReport(False, None, trainer.epoch, epochs_trained), trace

    stop = select_stop_epoch(decline, cfg)
    state = trainer.load_checkpoint(stop)
    if state is None:
        raise InternalConsistencyError(f"no checkpoint for stop epoch {stop}")
    trainer.load_state_dict(state)
    path = getattr(trainer, "checkpoint_path", lambda e: None)(stop)
    logger.info("entropy collapse at epoch %d; restored checkpoint %d", decline, stop)
    return trainer, StopReport(True, decline, stop, epochs_trained,
                               None if path is None else str(path)), trace
