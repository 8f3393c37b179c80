"""Batch-mean prediction regularizers.

Both regularizers act on the mean class distribution of a batch of
predictions.  Minimising either term spreads probability mass over every
head slot, including classes that never appear in the labeled set.

Functions accept torch tensors (returning 0-d tensors that carry gradients)
or array-likes (returning plain floats).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Union

import numpy as np
import torch

from .errors import DivergedTrainingError, InvalidArgumentError

LOG_FLOOR = 1e-12
DEFAULT_LAMBDA = 1.5

Scalar = Union[float, torch.Tensor]


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _out(value: torch.Tensor, keep_tensor: bool):
    return value if keep_tensor else float(value)


def batch_mean_prediction(probs):
    """Average the rows of a ``(B, n_classes)`` probability matrix."""
    p, keep = _as_tensor(probs)
    if p.ndim == 1:
        p = p.unsqueeze(0)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidArgumentError("batch_mean_prediction needs a non-empty (B, C) batch")
    p_bar = p.mean(dim=0)
    return p_bar if keep else p_bar.numpy()


def _plogp(p: torch.Tensor) -> torch.Tensor:
    # 0 log 0 := 0; the floor only guards the log argument
    return torch.where(p > 0, p * torch.log(p.clamp_min(LOG_FLOOR)), torch.zeros_like(p))


def uniform_entropy_regularizer(p_bar):
    """Negative Shannon entropy of ``p_bar`` in nats.

    Ranges over ``[-log C, 0]``; the minimum is attained only at the uniform
    distribution.
    """
    p, keep = _as_tensor(p_bar)
    if p.ndim != 1 or p.numel() == 0:
        raise InvalidArgumentError("p_bar must be a non-empty vector")
    return _out(_plogp(p).sum(), keep)


def validate_prior(g, n_classes=None) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise InvalidArgumentError("prior must be a non-empty vector")
    if n_classes is not None and g.size != n_classes:
        raise InvalidArgumentError(f"prior has {g.size} entries, expected {n_classes}")
    if np.any(g <= 0) or not np.all(np.isfinite(g)):
        raise InvalidArgumentError("prior entries must be strictly positive and finite")
    if abs(g.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"prior must sum to 1 (got {g.sum()!r})")
    return g


def prior_kl_regularizer(p_bar, g):
    """KL(p_bar || g), zero exactly when the batch mean matches the prior."""
    p, keep = _as_tensor(p_bar)
    if isinstance(g, torch.Tensor):
        validate_prior(g.detach().cpu().double().numpy(), p.numel())
        g_t = g.to(p.dtype)
    else:
        g_t = torch.as_tensor(validate_prior(g, p.numel()), dtype=p.dtype)
    if p.ndim != 1:
        raise InvalidArgumentError("p_bar must be a vector")
    kl = _plogp(p).sum() - (p * torch.log(g_t)).sum()
    return _out(kl, keep)


def _to_float(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossBreakdown:
    ls: Scalar
    lu: Scalar
    le: Scalar
    lam: float
    total: Scalar

    def detach(self) -> "LossBreakdown":
        """Return a copy holding plain floats."""
        return LossBreakdown(*(_to_float(v) for v in (self.ls, self.lu, self.le, self.lam, self.total)))

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self.detach()).items()}


def _is_finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return math.isfinite(x)


def combine_losses(ls, lu, le, lam=DEFAULT_LAMBDA, *, batch_index=None) -> LossBreakdown:
    """Assemble ``ls + lu + lam * le``.

    Raises :class:`DivergedTrainingError` when any term is non-finite.
    """
    for name, v in (("ls", ls), ("lu", lu), ("le", le), ("lambda", lam)):
        if not _is_finite(v):
            raise DivergedTrainingError(f"non-finite {name} loss", batch_index=batch_index)
    return LossBreakdown(ls, lu, le, lam, ls + lu + lam * le)
