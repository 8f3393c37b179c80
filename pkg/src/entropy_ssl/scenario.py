"""Few-shot / zero-shot scenario construction.

A scenario splits the class set into seen and unseen classes, labels a
handful of training examples from seen classes only, and leaves every other
training example unlabeled.  Builders return a :class:`DatasetBundle` whose
labels are already remapped into *head space*: seen classes occupy head slots
``0..n_seen-1`` and unseen classes the remaining slots, with the mapping kept
in ``class_map``.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError


@dataclass(frozen=True)
class ClassPartition:
    all_classes: tuple
    seen: tuple
    unseen: tuple

    def __post_init__(self):
        object.__setattr__(self, "all_classes", tuple(int(c) for c in self.all_classes))
        object.__setattr__(self, "seen", tuple(int(c) for c in self.seen))
        object.__setattr__(self, "unseen", tuple(int(c) for c in self.unseen))
        seen, unseen = set(self.seen), set(self.unseen)
        if not self.seen:
            raise InvalidArgumentError("partition needs at least one seen class")
        if seen & unseen:
            raise InvalidArgumentError("seen and unseen classes overlap")
        if seen | unseen != set(self.all_classes) or len(self.all_classes) != len(seen | unseen):
            raise InvalidArgumentError("seen and unseen classes must cover all classes exactly")

    @property
    def n_classes(self) -> int:
        return len(self.all_classes)

    @property
    def n_seen(self) -> int:
        return len(self.seen)

    @property
    def n_unseen(self) -> int:
        return len(self.unseen)

    def seen_mask(self, labels) -> np.ndarray:
        return np.isin(np.asarray(labels), self.seen)

    def head_map(self) -> dict:
        """Original class id -> head slot, seen classes first."""
        return {c: i for i, c in enumerate(self.seen + self.unseen)}

    def to_head_space(self) -> "ClassPartition":
        n = self.n_classes
        return ClassPartition(tuple(range(n)), tuple(range(self.n_seen)), tuple(range(self.n_seen, n)))

    @classmethod
    def from_seen(cls, n_classes: int, seen) -> "ClassPartition":
        seen = tuple(sorted(int(c) for c in set(seen)))
        unseen = tuple(c for c in range(n_classes) if c not in set(seen))
        return cls(tuple(range(n_classes)), seen, unseen)

    def to_dict(self) -> dict:
        return {"all_classes": list(self.all_classes), "seen": list(self.seen),
                "unseen": list(self.unseen)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassPartition":
        return cls(tuple(d["all_classes"]), tuple(d["seen"]), tuple(d["unseen"]))


@dataclass
class LabeledDataset:
    """Examples with integer labels in ``0..n_classes-1``.

    ``coarse`` optionally holds a per-class superclass map (CIFAR-100 style).
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    coarse: dict | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise InvalidArgumentError("X and y lengths differ")

    def __len__(self):
        return len(self.y)


@dataclass
class DatasetBundle:
    """Labeled, unlabeled and test sets for one scenario, in head space."""

    X_labeled: np.ndarray
    y_labeled: np.ndarray
    X_unlabeled: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    partition: ClassPartition
    class_map: dict
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    y_unlabeled: np.ndarray | None = field(default=None, repr=False)  # hidden truth, diagnostics only
    seed: int | None = None

    @property
    def original_partition(self) -> ClassPartition:
        inv = {v: k for k, v in self.class_map.items()}
        return ClassPartition(tuple(sorted(inv.values())),
                              tuple(inv[c] for c in self.partition.seen),
                              tuple(inv[c] for c in self.partition.unseen))

    def test_seen_mask(self) -> np.ndarray:
        return self.partition.seen_mask(self.y_test)

    def fit_arrays(self):
        """Stack L and U into sklearn's semi-supervised ``(X, y)`` form (``-1`` = unlabeled)."""
        X = np.concatenate([self.X_labeled, self.X_unlabeled])
        y = np.concatenate([self.y_labeled, np.full(len(self.X_unlabeled), -1, dtype=np.int64)])
        return X, y

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "partition": self.original_partition.to_dict(),
            "class_map": {str(k): int(v) for k, v in sorted(self.class_map.items())},
            "labeled_indices": [int(i) for i in self.labeled_idx],
            "n_unlabeled": int(len(self.unlabeled_idx)),
            "n_test": int(len(self.y_test)),
        }


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def split_classes(all_classes: Sequence[int], num_unseen: int, seed=None) -> ClassPartition:
    """Pick ``num_unseen`` classes uniformly at random to hide from the labeled set."""
    all_classes = tuple(int(c) for c in all_classes)
    if not 0 <= num_unseen < len(all_classes):
        raise InvalidArgumentError(
            f"num_unseen must be in [0, {len(all_classes)}), got {num_unseen}")
    perm = _rng(seed).permutation(len(all_classes))
    unseen = sorted(all_classes[i] for i in perm[:num_unseen])
    seen = [c for c in all_classes if c not in set(unseen)]
    return ClassPartition(all_classes, tuple(seen), tuple(unseen))


def split_classes_by_superclass(all_classes: Sequence[int], superclass_map: Mapping[int, int],
                                num_unseen: int, seed=None) -> ClassPartition:
    """Hide whole superclasses totalling exactly ``num_unseen`` classes.

    Superclasses are visited in a seeded random order; the earliest-ordered
    subset whose sizes sum to ``num_unseen`` is chosen.  With equal-sized
    superclasses this is a uniform draw of ``num_unseen / size`` superclasses.
    """
    all_classes = tuple(int(c) for c in all_classes)
    missing = [c for c in all_classes if c not in superclass_map]
    if missing:
        raise InvalidArgumentError(f"classes without a superclass: {missing[:5]}")
    if not 0 <= num_unseen < len(all_classes):
        raise InvalidArgumentError(
            f"num_unseen must be in [0, {len(all_classes)}), got {num_unseen}")
    groups: dict[int, list[int]] = {}
    for c in all_classes:
        groups.setdefault(int(superclass_map[c]), []).append(c)
    keys = sorted(groups)
    order = [keys[i] for i in _rng(seed).permutation(len(keys))]
    sizes = [len(groups[k]) for k in order]

    # reachable[i][s]: sum s attainable using order[i:]
    n = len(order)
    reachable = [[False] * (num_unseen + 1) for _ in range(n + 1)]
    reachable[n][0] = True
    for i in range(n - 1, -1, -1):
        for s in range(num_unseen + 1):
            reachable[i][s] = reachable[i + 1][s] or (s >= sizes[i] and reachable[i + 1][s - sizes[i]])
    if not reachable[0][num_unseen]:
        raise InvalidArgumentError(
            f"num_unseen={num_unseen} cannot be formed from whole superclasses")
    chosen, s = [], num_unseen
    for i in range(n):
        if s >= sizes[i] and reachable[i + 1][s - sizes[i]]:
            chosen.append(order[i])
            s -= sizes[i]
        if s == 0:
            break
    unseen = sorted(c for k in chosen for c in groups[k])
    seen = [c for c in all_classes if c not in set(unseen)]
    return ClassPartition(all_classes, tuple(seen), tuple(unseen))


def _bundle(full_train: LabeledDataset, partition: ClassPartition, labeled_idx: np.ndarray,
            test: LabeledDataset | None, seed) -> DatasetBundle:
    cmap = partition.head_map()
    lut = np.full(max(cmap) + 1, -1, dtype=np.int64)
    for orig, head in cmap.items():
        lut[orig] = head
    mask = np.ones(len(full_train), dtype=bool)
    mask[labeled_idx] = False
    unlabeled_idx = np.flatnonzero(mask)
    if test is None:
        X_test = full_train.X[:0]
        y_test = np.zeros(0, dtype=np.int64)
    else:
        X_test, y_test = test.X, lut[test.y]
    return DatasetBundle(
        X_labeled=full_train.X[labeled_idx],
        y_labeled=lut[full_train.y[labeled_idx]],
        X_unlabeled=full_train.X[unlabeled_idx],
        X_test=X_test,
        y_test=y_test,
        partition=partition.to_head_space(),
        class_map=cmap,
        labeled_idx=labeled_idx,
        unlabeled_idx=unlabeled_idx,
        y_unlabeled=lut[full_train.y[unlabeled_idx]],
        seed=seed,
    )


def build_balanced_fewshot(full_train: LabeledDataset, partition: ClassPartition, k: int,
                           seed=None, test: LabeledDataset | None = None) -> DatasetBundle:
    """Label exactly ``k`` random examples of every seen class."""
    if k < 1:
        raise InvalidArgumentError("k must be at least 1")
    rng = _rng(seed)
    picked = []
    for c in partition.seen:
        idx = np.flatnonzero(full_train.y == c)
        if len(idx) < k:
            raise InsufficientDataError(f"class {c} has {len(idx)} examples, need {k}")
        picked.append(rng.choice(idx, size=k, replace=False))
    labeled_idx = np.sort(np.concatenate(picked))
    return _bundle(full_train, partition, labeled_idx, test, seed)


def build_budget_labeled(full_train: LabeledDataset, n: int, seed=None,
                         test: LabeledDataset | None = None) -> DatasetBundle:
    """Label ``n`` examples drawn uniformly without replacement.

    Seen classes are whichever classes the draw happens to hit.
    """
    if not 0 < n <= len(full_train):
        raise InvalidArgumentError(f"budget must be in [1, {len(full_train)}], got {n}")
    labeled_idx = np.sort(_rng(seed).choice(len(full_train), size=n, replace=False))
    partition = ClassPartition.from_seen(full_train.n_classes, np.unique(full_train.y[labeled_idx]))
    return _bundle(full_train, partition, labeled_idx, test, seed)


def make_synthetic_blobs(num_classes: int, dims: int, per_class: int, separation: float,
                         seed=None, noise: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian clusters, one per class.

    Each class mean lies at distance ``separation * noise`` from the origin
    along its own direction (orthonormal when ``num_classes <= dims``), so
    ``separation`` is measured in units of the per-coordinate noise scale.
    """
    if num_classes < 1 or dims < 1 or per_class < 1:
        raise InvalidArgumentError("num_classes, dims and per_class must be positive")
    if separation <= 0 or noise <= 0:
        raise InvalidArgumentError("separation and noise must be positive")
    rng = _rng(seed)
    if num_classes <= dims:
        q, _ = np.linalg.qr(rng.normal(size=(dims, dims)))
        directions = q[:, :num_classes].T
    else:
        directions = rng.normal(size=(num_classes, dims))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = separation * noise * directions
    y = np.repeat(np.arange(num_classes), per_class)
    X = centers[y] + noise * rng.normal(size=(len(y), dims))
    return LabeledDataset(X.astype(np.float32), y, num_classes)


def split_train_test(dataset: LabeledDataset, test_per_class: int, seed=None):
    """Hold out ``test_per_class`` examples of every class."""
    rng = _rng(seed)
    test_idx = []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.y == c)
        if len(idx) < test_per_class:
            raise InsufficientDataError(f"class {c} has only {len(idx)} examples")
        test_idx.append(rng.choice(idx, size=test_per_class, replace=False))
    test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, dtype=np.int64)
    mask = np.ones(len(dataset), dtype=bool)
    mask[test_idx] = False
    train = LabeledDataset(dataset.X[mask], dataset.y[mask], dataset.n_classes, dataset.coarse)
    test = LabeledDataset(dataset.X[test_idx], dataset.y[test_idx], dataset.n_classes, dataset.coarse)
    return train, test


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def load_cifar(root, train: bool = True) -> LabeledDataset:
    """Read the python-pickle CIFAR-10 / CIFAR-100 archives.

    ``root`` is the extracted ``cifar-10-batches-py`` or ``cifar-100-python``
    directory.  Images come back as float32 ``(N, 3, 32, 32)`` in ``[0, 1]``.
    """
    root = Path(root)
    if (root / "meta").exists():
        d = _unpickle(root / ("train" if train else "test"))
        X, y = d["data"], np.asarray(d["fine_labels"])
        coarse = dict(zip((int(f) for f in d["fine_labels"]), (int(c) for c in d["coarse_labels"])))
        n_classes = 100
    elif (root / "batches.meta").exists():
        files = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
        parts = [_unpickle(root / f) for f in files]
        X = np.concatenate([p["data"] for p in parts])
        y = np.concatenate([np.asarray(p["labels"]) for p in parts])
        coarse, n_classes = None, 10
    else:
        raise InvalidArgumentError(f"{root} does not look like a CIFAR python archive")
    X = X.reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledDataset(X, y, n_classes, coarse)
