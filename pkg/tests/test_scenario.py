import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entropy_ssl.errors import InsufficientDataError, InvalidArgumentError
from entropy_ssl.scenario import (ClassPartition, LabeledDataset, build_balanced_fewshot,
                                  build_budget_labeled, make_synthetic_blobs, split_classes,
                                  split_classes_by_superclass, split_train_test)


def pool(n_classes=100, per_class=500):
    y = np.repeat(np.arange(n_classes), per_class)
    return LabeledDataset(np.arange(len(y), dtype=np.float32)[:, None], y, n_classes)


CIFAR100_COARSE = {c: c // 5 for c in range(100)}


class TestPartition:
    def test_overlap_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ClassPartition((0, 1, 2), (0, 1), (1, 2))

    def test_must_cover(self):
        with pytest.raises(InvalidArgumentError):
            ClassPartition((0, 1, 2), (0,), (1,))

    def test_seen_non_empty(self):
        with pytest.raises(InvalidArgumentError):
            ClassPartition((0, 1), (), (0, 1))

    def test_head_space(self):
        p = ClassPartition((0, 1, 2, 3), (1, 3), (0, 2))
        assert p.head_map() == {1: 0, 3: 1, 0: 2, 2: 3}
        h = p.to_head_space()
        assert h.seen == (0, 1) and h.unseen == (2, 3)

    def test_dict_round_trip(self):
        p = ClassPartition((0, 1, 2), (2,), (0, 1))
        assert ClassPartition.from_dict(p.to_dict()) == p


class TestSplitClasses:
    def test_sizes(self):
        p = split_classes(range(100), 40, seed=3)
        assert p.n_seen == 60 and p.n_unseen == 40

    def test_no_unseen(self):
        p = split_classes(range(100), 0, seed=9)
        assert p.unseen == () and p.seen == tuple(range(100))

    def test_deterministic(self):
        assert split_classes(range(50), 10, seed=1) == split_classes(range(50), 10, seed=1)

    @pytest.mark.parametrize("k", [-1, 100, 101])
    def test_out_of_range(self, k):
        with pytest.raises(InvalidArgumentError):
            split_classes(range(100), k, seed=0)

    @given(st.integers(2, 40), st.data())
    def test_disjoint_cover(self, n, data):
        k = data.draw(st.integers(0, n - 1))
        p = split_classes(range(n), k, seed=data.draw(st.integers(0, 1000)))
        assert set(p.seen) | set(p.unseen) == set(range(n)) and not set(p.seen) & set(p.unseen)


class TestSuperclassSplit:
    def test_cifar100_45(self):
        p = split_classes_by_superclass(range(100), CIFAR100_COARSE, 45, seed=0)
        groups = {CIFAR100_COARSE[c] for c in p.unseen}
        assert p.n_unseen == 45 and len(groups) == 9
        for g in groups:
            assert all(CIFAR100_COARSE[c] in groups for c in p.unseen)
            assert sum(CIFAR100_COARSE[c] == g for c in p.unseen) == 5

    def test_forced_single_superclass(self):
        m = {c: c // 2 for c in range(8)}
        p = split_classes_by_superclass(range(8), m, 2, seed=4)
        assert len({m[c] for c in p.unseen}) == 1

    def test_not_representable(self):
        with pytest.raises(InvalidArgumentError):
            split_classes_by_superclass(range(100), CIFAR100_COARSE, 7, seed=0)

    def test_uneven_sizes(self):
        m = {0: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 2}
        for seed in range(10):
            p = split_classes_by_superclass(range(6), m, 3, seed=seed)
            assert sorted(p.unseen) in ([0, 1, 2], [3, 4, 5])

    def test_seed_varies_choice(self):
        picks = {split_classes_by_superclass(range(100), CIFAR100_COARSE, 45, seed=s).unseen
                 for s in range(5)}
        assert len(picks) > 1


class TestBalancedFewshot:
    def test_cifar100_sizes(self):
        part = split_classes(range(100), 40, seed=0)
        b = build_balanced_fewshot(pool(), part, 4, seed=0)
        assert len(b.y_labeled) == 240 and len(b.X_unlabeled) == 49760

    def test_one_label_65_seen(self):
        part = split_classes(range(100), 35, seed=1)
        b = build_balanced_fewshot(pool(), part, 1, seed=1)
        assert len(b.y_labeled) == 65
        assert np.array_equal(np.bincount(b.y_labeled), np.ones(65))

    def test_class_too_small(self):
        part = split_classes(range(4), 1, seed=0)
        with pytest.raises(InsufficientDataError):
            build_balanced_fewshot(pool(4, 3), part, 4, seed=0)

    def test_bundle_invariants(self):
        data = pool(10, 30)
        train, test = split_train_test(data, 5, seed=2)
        part = split_classes(range(10), 3, seed=2)
        b = build_balanced_fewshot(train, part, 2, seed=2, test=test)
        assert set(b.y_labeled) <= set(b.partition.seen)
        assert not set(b.labeled_idx) & set(b.unlabeled_idx)
        assert len(b.labeled_idx) + len(b.unlabeled_idx) == len(train)
        # features here are unique ids, so disjointness can be checked on values
        test_ids = set(test.X[:, 0])
        assert not test_ids & set(b.X_labeled[:, 0]) and not test_ids & set(b.X_unlabeled[:, 0])
        assert b.test_seen_mask().sum() == 7 * 5
        assert b.original_partition == part
        X, y = b.fit_arrays()
        assert (y == -1).sum() == len(b.X_unlabeled) and len(X) == len(y)

    def test_deterministic(self):
        part = split_classes(range(10), 3, seed=0)
        a = build_balanced_fewshot(pool(10, 20), part, 3, seed=5)
        b = build_balanced_fewshot(pool(10, 20), part, 3, seed=5)
        assert np.array_equal(a.labeled_idx, b.labeled_idx)


class TestBudget:
    def test_bounds(self):
        with pytest.raises(InvalidArgumentError):
            build_budget_labeled(pool(10, 5), 0, seed=0)
        with pytest.raises(InvalidArgumentError):
            build_budget_labeled(pool(10, 5), 51, seed=0)

    def test_full_budget_has_no_unseen(self):
        b = build_budget_labeled(pool(10, 5), 50, seed=0)
        assert b.partition.unseen == ()

    def test_seen_are_hit_classes(self):
        b = build_budget_labeled(pool(20, 10), 15, seed=3)
        assert b.partition.n_seen == len(np.unique(b.y_labeled))

    def test_expected_unseen_count(self):
        data = pool()
        unseen = [build_budget_labeled(data, 100, seed=s).partition.n_unseen for s in range(200)]
        assert abs(np.mean(unseen) - 100 * (1 - 1 / 100) ** 100) < 1.0


class TestBlobs:
    def test_nearest_centroid_accuracy(self):
        d = make_synthetic_blobs(8, 16, 500, 6.0, seed=0)
        centroids = np.stack([d.X[d.y == c].mean(0) for c in range(8)])
        pred = ((d.X[:, None, :] - centroids[None]) ** 2).sum(-1).argmin(1)
        assert np.mean(pred == d.y) > 0.99

    def test_single_class(self):
        d = make_synthetic_blobs(1, 4, 10, 3.0, seed=0)
        assert set(d.y) == {0}

    def test_bit_identical(self):
        a = make_synthetic_blobs(5, 3, 20, 2.0, seed=11)
        b = make_synthetic_blobs(5, 3, 20, 2.0, seed=11)
        assert a.X.tobytes() == b.X.tobytes() and np.array_equal(a.y, b.y)

    @pytest.mark.parametrize("args", [(0, 2, 5, 1.0), (3, 0, 5, 1.0), (3, 2, 0, 1.0), (3, 2, 5, 0.0)])
    def test_non_positive(self, args):
        with pytest.raises(InvalidArgumentError):
            make_synthetic_blobs(*args, seed=0)

    def test_more_classes_than_dims(self):
        d = make_synthetic_blobs(12, 4, 30, 5.0, seed=1)
        assert d.X.shape == (360, 4)


def test_split_train_test_sizes():
    train, test = split_train_test(pool(6, 10), 3, seed=0)
    assert len(test) == 18 and len(train) == 42
    assert np.array_equal(np.bincount(test.y), np.full(6, 3))
