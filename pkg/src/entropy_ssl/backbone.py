"""Pseudo-labeling SSL backbone with a classifier head over every class.

The trainer follows the FixMatch weak/strong consistency recipe with
FlexMatch's per-class curriculum thresholds.  The head always spans seen and
unseen classes; an optional batch-mean regularizer from
:mod:`entropy_ssl.regularizer` is added to the objective.
"""

from __future__ import annotations

import copy
import logging
from pathlib import Path
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DivergedTrainingError, InvalidArgumentError
from .regularizer import (
    DEFAULT_LAMBDA,
    LOG_FLOOR,
    LossBreakdown,
    batch_mean_prediction,
    combine_losses,
    prior_kl_regularizer,
    uniform_entropy_regularizer,
    validate_prior,
)

logger = logging.getLogger(__name__)

REGULARIZERS = ("uniform", "prior", "off")


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------
class MLPNet(nn.Module):
    """Two hidden layers followed by a linear head."""

    def __init__(self, in_dim, n_classes, hidden=128, feature_dim=64, zero_head=False):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, n_classes)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        feats = self.body(x)
        return self.head(feats), feats


class SmallConvNet(nn.Module):
    """Three conv blocks for 32x32 images; the desk-scale stand-in for a WRN."""

    def __init__(self, in_channels, n_classes, width=32, feature_dim=128, zero_head=False):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                                 nn.BatchNorm2d(cout), nn.LeakyReLU(0.1), nn.MaxPool2d(2))

        self.body = nn.Sequential(
            block(in_channels, width), block(width, 2 * width), block(2 * width, 4 * width),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(4 * width, feature_dim), nn.LeakyReLU(0.1),
        )
        self.head = nn.Linear(feature_dim, n_classes)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        feats = self.body(x)
        return self.head(feats), feats


@dataclass
class ModelConfig:
    family: str = "mlp"  # "mlp" | "conv"
    hidden: int = 128
    feature_dim: int = 64
    width: int = 32
    zero_head: bool = False


def build_model(cfg: ModelConfig, input_shape, n_classes: int) -> nn.Module:
    if n_classes < 1:
        raise InvalidArgumentError("n_classes must be positive")
    if cfg.family == "mlp":
        return MLPNet(int(np.prod(input_shape)), n_classes, cfg.hidden, cfg.feature_dim, cfg.zero_head)
    if cfg.family == "conv":
        return SmallConvNet(input_shape[0], n_classes, cfg.width, cfg.feature_dim, cfg.zero_head)
    raise InvalidArgumentError(f"unknown model family {cfg.family!r}")


def head_dim(model: nn.Module) -> int:
    return model.head.out_features


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------
class VectorAugment:
    """Weak: small Gaussian jitter.  Strong: large jitter plus coordinate dropout."""

    def __init__(self, weak_std=0.1, strong_std=0.6, drop_prob=0.2):
        self.weak_std = weak_std
        self.strong_std = strong_std
        self.drop_prob = drop_prob

    def weak(self, x, gen):
        return x + self.weak_std * torch.randn(x.shape, generator=gen, dtype=x.dtype)

    def strong(self, x, gen):
        x = x + self.strong_std * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        keep = torch.rand(x.shape, generator=gen) >= self.drop_prob
        return x * keep


class ImageAugment:
    """Weak: flip and shifted crop.  Strong: weak plus noise and a cutout square."""

    def __init__(self, pad=4, noise_std=0.1, cutout=8):
        self.pad = pad
        self.noise_std = noise_std
        self.cutout = cutout

    def _flip_shift(self, x, gen):
        n, _, h, w = x.shape
        flip = torch.rand(n, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        padded = F.pad(x, (self.pad,) * 4, mode="reflect")
        dx = torch.randint(0, 2 * self.pad + 1, (n,), generator=gen)
        dy = torch.randint(0, 2 * self.pad + 1, (n,), generator=gen)
        return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])

    def weak(self, x, gen):
        return self._flip_shift(x, gen)

    def strong(self, x, gen):
        x = self._flip_shift(x, gen)
        x = x + self.noise_std * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        n, _, h, w = x.shape
        cy = torch.randint(0, h, (n,), generator=gen)
        cx = torch.randint(0, w, (n,), generator=gen)
        ys = torch.arange(h)[None, :, None]
        xs = torch.arange(w)[None, None, :]
        half = self.cutout // 2
        box = ((ys - cy[:, None, None]).abs() <= half) & ((xs - cx[:, None, None]).abs() <= half)
        return x * (~box)[:, None].to(x.dtype)


def default_augment(input_shape):
    return ImageAugment() if len(input_shape) == 3 else VectorAugment()


# --------------------------------------------------------------------------
# predictions and losses
# --------------------------------------------------------------------------
@dataclass
class PredictionBatch:
    probs: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.probs)


def forward(model: nn.Module, examples, batch_size: int = 4096) -> PredictionBatch:
    """Eval-mode forward pass returning probabilities and penultimate features."""
    x = torch.as_tensor(np.asarray(examples, dtype=np.float32))
    if x.ndim < 2 or x.shape[0] == 0:
        raise InvalidArgumentError("forward needs a non-empty batch")
    was_training = model.training
    model.eval()
    probs, feats = [], []
    try:
        with torch.no_grad():
            for start in range(0, len(x), batch_size):
                logits, f = model(x[start:start + batch_size])
                probs.append(torch.softmax(logits.double(), dim=1))
                feats.append(f)
    except RuntimeError as exc:
        raise InvalidArgumentError(f"input shape {tuple(x.shape)} does not fit the model: {exc}") from exc
    finally:
        model.train(was_training)
    return PredictionBatch(torch.cat(probs).numpy(), torch.cat(feats).numpy())


def _as_prob_tensor(probs):
    if isinstance(probs, PredictionBatch):
        probs = probs.probs
    if isinstance(probs, torch.Tensor):
        return probs
    return torch.as_tensor(np.asarray(probs, dtype=np.float64))


def supervised_loss(probs, labels, seen=None):
    """Mean cross-entropy of the labeled batch over the full head.

    ``seen`` (optional) lists the admissible label ids.
    """
    p = _as_prob_tensor(probs)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if seen is not None and not np.isin(y.numpy(), list(seen)).all():
        raise InvalidArgumentError("supervised_loss received a label outside the seen classes")
    if len(y) != len(p):
        raise InvalidArgumentError("probs and labels differ in length")
    loss = F.nll_loss(torch.log(p.clamp_min(LOG_FLOOR)), y)
    return loss if isinstance(probs, torch.Tensor) else float(loss)


def _convex(beta):
    return beta / (2.0 - beta)


@dataclass
class CurriculumState:
    """FlexMatch bookkeeping: the latest confident pseudo-label per unlabeled point.

    ``selected`` holds ``-1`` for points never predicted with confidence at
    least ``base_threshold``.  ``thresholds`` are the per-class cut-offs used
    for the next batch.
    """

    selected: np.ndarray
    thresholds: np.ndarray
    base_threshold: float = 0.95
    warmup: bool = True

    @classmethod
    def initial(cls, n_unlabeled, n_classes, base_threshold=0.95, warmup=True):
        if not 0 < base_threshold < 1:
            raise InvalidArgumentError("base threshold must lie in (0, 1)")
        return cls(np.full(n_unlabeled, -1, dtype=np.int64),
                   np.full(n_classes, float(base_threshold)), base_threshold, warmup)

    @property
    def counts(self) -> np.ndarray:
        sel = self.selected[self.selected >= 0]
        return np.bincount(sel, minlength=len(self.thresholds))

    def learning_effect(self) -> np.ndarray:
        counts = self.counts
        denom = counts.max()
        if self.warmup:
            denom = max(denom, int((self.selected < 0).sum()))
        if denom == 0:
            return np.zeros(len(counts))
        return counts / denom

    def updated(self, indices, pseudo, confidence) -> "CurriculumState":
        sel = self.selected.copy()
        confident = np.asarray(confidence) >= self.base_threshold
        sel[np.asarray(indices)[confident]] = np.asarray(pseudo)[confident]
        new = replace(self, selected=sel)
        new.thresholds = self.base_threshold * _convex(new.learning_effect())
        return new

    def state_dict(self) -> dict:
        return {"selected": self.selected.copy(), "thresholds": self.thresholds.copy(),
                "base_threshold": self.base_threshold, "warmup": self.warmup}

    @classmethod
    def from_state_dict(cls, d) -> "CurriculumState":
        return cls(np.array(d["selected"]), np.array(d["thresholds"]), d["base_threshold"], d["warmup"])


def unsupervised_loss(weak, strong, state: CurriculumState, indices=None):
    """Curriculum pseudo-label consistency loss.

    Pseudo-labels are the argmax of the ``weak`` rows; a point contributes
    when its weak confidence reaches the current threshold of its
    pseudo-class.  The loss is the cross-entropy of the ``strong`` rows
    against these pseudo-labels, averaged over the whole unlabeled batch
    (excluded points contribute zero).

    Returns ``(loss, updated_state, mask)``.
    """
    pw = _as_prob_tensor(weak).detach()
    ps = _as_prob_tensor(strong)
    if pw.shape != ps.shape:
        raise InvalidArgumentError(f"weak batch {tuple(pw.shape)} and strong batch {tuple(ps.shape)} differ")
    if indices is None:
        indices = np.arange(len(pw))
    conf, pseudo = pw.max(dim=1)
    conf_np, pseudo_np = conf.numpy(), pseudo.numpy()
    mask_np = conf_np >= state.thresholds[pseudo_np]
    mask = torch.as_tensor(mask_np, dtype=ps.dtype)
    ce = F.nll_loss(torch.log(ps.clamp_min(LOG_FLOOR)), pseudo, reduction="none")
    loss = (ce * mask).mean()
    new_state = state.updated(indices, pseudo_np, conf_np)
    out = loss if isinstance(strong, torch.Tensor) else float(loss)
    return out, new_state, mask_np


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------
@dataclass
class TrainConfig:
    batch_size: int = 64
    uratio: int = 7
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_epochs: int = 60
    threshold: float = 0.95
    lam: float = DEFAULT_LAMBDA
    regularizer: str = "uniform"
    seed: int = 0

    def validate(self):
        if self.regularizer is False:  # bare `off` in a YAML file
            self.regularizer = "off"
        if self.batch_size < 1 or self.uratio < 1:
            raise InvalidArgumentError("batch_size and uratio must be >= 1")
        if not 0 < self.threshold < 1:
            raise InvalidArgumentError("threshold must lie in (0, 1)")
        if self.lam < 0:
            raise InvalidArgumentError("lambda must be non-negative")
        if self.regularizer not in REGULARIZERS:
            raise InvalidArgumentError(f"regularizer must be one of {REGULARIZERS}")
        if self.max_epochs < 1:
            raise InvalidArgumentError("max_epochs must be >= 1")
        return self


def make_regularizer(kind: str, prior=None):
    """Return ``p_bar -> le`` for the requested regularizer kind."""
    if kind in ("uniform", "off"):
        return uniform_entropy_regularizer
    if kind == "prior":
        if prior is None:
            raise InvalidArgumentError("prior regularizer needs a prior vector")
        g = torch.as_tensor(validate_prior(prior))
        return lambda p_bar: prior_kl_regularizer(p_bar, g)
    raise InvalidArgumentError(f"unknown regularizer {kind!r}")


@dataclass
class EpochResult:
    losses: LossBreakdown  # per-batch averages
    trace: list = field(default_factory=list)  # per-batch LossBreakdown
    mask_rate: float = 0.0
    mean_confidence: float = 0.0
    entropy: float = 0.0  # batch-mean prediction entropy, averaged over steps


def train_epoch(model, optimizer, X_labeled, y_labeled, X_unlabeled, cfg: TrainConfig,
                curriculum: CurriculumState, regularizer, gen: torch.Generator, augment,
                apply_regularizer: bool = True):
    """One pass over the unlabeled set.

    Each step draws ``batch_size`` labeled and ``uratio * batch_size``
    unlabeled points, forwards the labeled, weak and strong views together,
    and minimises ``ls + lu + lam * le``.  With ``apply_regularizer=False``
    ``le`` is still measured (for monitoring) but kept off the graph.

    Returns ``(curriculum, EpochResult)``.
    """
    model.train()
    xl_all = torch.as_tensor(X_labeled)
    yl_all = torch.as_tensor(y_labeled, dtype=torch.long)
    xu_all = torch.as_tensor(X_unlabeled)
    n_l, n_u = len(xl_all), len(xu_all)
    ub = min(cfg.uratio * cfg.batch_size, n_u)
    n_steps = max(n_u // ub, 1)
    u_order = torch.randperm(n_u, generator=gen)
    l_order = torch.cat([torch.randperm(n_l, generator=gen)
                         for _ in range(-(-n_steps * cfg.batch_size // n_l))])

    trace, entropies, mask_hits, conf_sum = [], [], 0, 0.0
    for step in range(n_steps):
        u_idx = u_order[step * ub:(step + 1) * ub]
        l_idx = l_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        xl, yl = xl_all[l_idx], yl_all[l_idx]
        xu = xu_all[u_idx]
        xw = augment.weak(xu, gen)
        xs = augment.strong(xu, gen)
        logits, _ = model(torch.cat([augment.weak(xl, gen), xw, xs]))
        lg_l = logits[:len(xl)]
        lg_w, lg_s = logits[len(xl):].chunk(2)

        ls = F.cross_entropy(lg_l, yl)
        pw = torch.softmax(lg_w, dim=1)
        lu, curriculum, mask = unsupervised_loss(pw.detach(), torch.softmax(lg_s, dim=1),
                                                 curriculum, u_idx.numpy())
        if apply_regularizer:
            le = regularizer(batch_mean_prediction(pw))
            parts = combine_losses(ls, lu, le, cfg.lam, batch_index=step)
        else:
            with torch.no_grad():
                le = regularizer(batch_mean_prediction(pw))
            parts = combine_losses(ls, lu, le, 0.0, batch_index=step)
            parts.total = ls + lu
        optimizer.zero_grad()
        parts.total.backward()
        optimizer.step()

        trace.append(parts.detach())
        with torch.no_grad():
            entropies.append(-uniform_entropy_regularizer(batch_mean_prediction(pw.detach())).item())
        mask_hits += int(mask.sum())
        conf_sum += float(pw.detach().max(dim=1).values.sum())

    n_seen_u = n_steps * ub
    mean = LossBreakdown(
        *(float(np.mean([getattr(t, k) for t in trace])) for k in ("ls", "lu", "le")),
        cfg.lam if apply_regularizer else 0.0,
        float(np.mean([t.total for t in trace])),
    )
    return curriculum, EpochResult(mean, trace, mask_hits / n_seen_u, conf_sum / n_seen_u,
                                   float(np.mean(entropies)))


class SSLTrainer:
    """Owns the model, optimizer and curriculum for one run and checkpoints each epoch.

    ``checkpoints`` maps epoch index to a state snapshot taken *after* that
    epoch; epoch ``-1`` is the initial state.  ``checkpoint_dir`` additionally
    writes every snapshot to disk.
    """

    def __init__(self, X_labeled, y_labeled, X_unlabeled, n_classes, train_cfg: TrainConfig,
                 model_cfg: ModelConfig | None = None, prior=None, augment=None,
                 checkpoint_dir=None, keep_checkpoints=True):
        self.cfg = train_cfg.validate()
        self.model_cfg = model_cfg or ModelConfig()
        self.X_labeled = np.asarray(X_labeled, dtype=np.float32)
        self.y_labeled = np.asarray(y_labeled, dtype=np.int64)
        self.X_unlabeled = np.asarray(X_unlabeled, dtype=np.float32)
        if len(self.X_labeled) == 0 or len(self.X_unlabeled) == 0:
            raise InvalidArgumentError("training needs labeled and unlabeled examples")
        if self.y_labeled.min() < 0 or self.y_labeled.max() >= n_classes:
            raise InvalidArgumentError("labeled targets fall outside the head")
        self.n_classes = n_classes
        input_shape = self.X_labeled.shape[1:]
        self.gen = torch.Generator().manual_seed(self.cfg.seed)
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            self.model = build_model(self.model_cfg, input_shape, n_classes)
        self.optimizer = torch.optim.SGD(self.model.parameters(), lr=self.cfg.lr,
                                         momentum=self.cfg.momentum,
                                         weight_decay=self.cfg.weight_decay, nesterov=True)
        self.curriculum = CurriculumState.initial(len(self.X_unlabeled), n_classes, self.cfg.threshold)
        self.regularizer = make_regularizer(self.cfg.regularizer, prior)
        self.augment = augment or default_augment(input_shape)
        self.epoch = -1
        self.history: list[dict] = []
        self.checkpoint_dir = checkpoint_dir
        self.keep_checkpoints = keep_checkpoints
        self.checkpoints: dict[int, dict] = {}
        self.save_checkpoint()

    @property
    def apply_regularizer(self) -> bool:
        return self.cfg.regularizer != "off"

    def run_epoch(self) -> EpochResult:
        self.curriculum, result = train_epoch(
            self.model, self.optimizer, self.X_labeled, self.y_labeled, self.X_unlabeled,
            self.cfg, self.curriculum, self.regularizer, self.gen, self.augment,
            apply_regularizer=self.apply_regularizer)
        self.epoch += 1
        record = {"epoch": self.epoch, **result.losses.to_dict(), "entropy": result.entropy,
                  "mask_rate": result.mask_rate, "mean_confidence": result.mean_confidence}
        self.history.append(record)
        logger.debug("epoch %d: %s", self.epoch, record)
        self.save_checkpoint()
        return result

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "model": copy.deepcopy(self.model.state_dict()),
            "optimizer": copy.deepcopy(self.optimizer.state_dict()),
            "curriculum": self.curriculum.state_dict(),
            "rng": self.gen.get_state(),
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.curriculum = CurriculumState.from_state_dict(state["curriculum"])
        self.gen.set_state(state["rng"])
        self.epoch = state["epoch"]

    def save_checkpoint(self):
        state = self.state_dict()
        if self.keep_checkpoints:
            self.checkpoints[self.epoch] = state
        if self.checkpoint_dir is not None:
            path = Path(self.checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            torch.save(state, path / f"epoch_{self.epoch:05d}.pt")

    def checkpoint_path(self, epoch):
        if self.checkpoint_dir is None:
            return None
        return Path(self.checkpoint_dir) / f"epoch_{epoch:05d}.pt"

    def load_checkpoint(self, epoch: int) -> dict | None:
        if epoch in self.checkpoints:
            return self.checkpoints[epoch]
        path = self.checkpoint_path(epoch)
        if path is not None and path.exists():
            return torch.load(path, weights_only=False)
        return None

    def predict(self, X) -> PredictionBatch:
        return forward(self.model, X)
