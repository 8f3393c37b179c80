import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from entropy_ssl.errors import DivergedTrainingError, InvalidArgumentError
from entropy_ssl.regularizer import (LossBreakdown, batch_mean_prediction, combine_losses,
                                     prior_kl_regularizer, uniform_entropy_regularizer,
                                     validate_prior)


def neg_entropy_oracle(p):
    return math.fsum(x * math.log(x) for x in p if x > 0)


def kl_oracle(p, g):
    return math.fsum(x * (math.log(x) - math.log(y)) for x, y in zip(p, g) if x > 0)


simplex = st.integers(2, 12).flatmap(
    lambda n: st.lists(st.floats(0.01, 10.0), min_size=n, max_size=n)).map(
    lambda v: np.asarray(v) / np.sum(v))


class TestBatchMean:
    def test_symmetric_rows(self):
        np.testing.assert_allclose(batch_mean_prediction([[1, 0], [0, 1]]), [0.5, 0.5])

    def test_single_row(self):
        r = np.array([[0.2, 0.3, 0.5]])
        np.testing.assert_allclose(batch_mean_prediction(r), r[0])

    def test_three_rows(self):
        rows = [[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]]
        np.testing.assert_allclose(batch_mean_prediction(rows), [0.6, 0.4], atol=1e-15)

    def test_empty_batch(self):
        with pytest.raises(InvalidArgumentError):
            batch_mean_prediction(np.zeros((0, 3)))

    def test_tensor_in_tensor_out(self):
        out = batch_mean_prediction(torch.tensor([[0.25, 0.75], [0.75, 0.25]]))
        assert isinstance(out, torch.Tensor)

    @given(st.integers(1, 20), st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_mean_is_distribution(self, b, c, seed):
        rows = np.random.default_rng(seed).dirichlet(np.ones(c), size=b)
        p = np.asarray(batch_mean_prediction(rows))
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-6


class TestUniformEntropy:
    def test_uniform_100(self):
        assert uniform_entropy_regularizer(np.full(100, 0.01)) == pytest.approx(-4.605170, abs=1e-6)
        assert uniform_entropy_regularizer(np.full(100, 0.01)) == pytest.approx(-math.log(100), abs=1e-12)

    def test_one_hot_is_zero(self):
        assert uniform_entropy_regularizer([0.0, 1.0, 0.0]) == 0.0

    def test_hand_example(self):
        assert uniform_entropy_regularizer([0.5, 0.25, 0.25]) == pytest.approx(-1.039721, abs=1e-6)

    @given(simplex)
    def test_matches_direct_sum(self, p):
        assert uniform_entropy_regularizer(p) == pytest.approx(neg_entropy_oracle(p), abs=1e-12)

    @given(simplex, st.randoms())
    def test_permutation_invariant(self, p, rnd):
        q = list(p)
        rnd.shuffle(q)
        assert uniform_entropy_regularizer(q) == pytest.approx(uniform_entropy_regularizer(p), abs=1e-12)

    @given(st.integers(2, 20), st.integers(0, 2**31 - 1))
    def test_uniform_is_strict_minimum(self, c, seed):
        rng = np.random.default_rng(seed)
        u = np.full(c, 1.0 / c)
        q = np.abs(u + rng.normal(scale=0.05, size=c))
        q /= q.sum()
        if np.max(np.abs(q - u)) > 1e-6:
            assert uniform_entropy_regularizer(q) > uniform_entropy_regularizer(u)

    def test_zero_entries_have_zero_gradient_contribution(self):
        p = torch.tensor([0.0, 0.5, 0.5], dtype=torch.float64, requires_grad=True)
        uniform_entropy_regularizer(p).backward()
        assert torch.isfinite(p.grad).all()


class TestPriorKL:
    def test_equal_is_zero(self):
        g = np.array([0.2, 0.3, 0.5])
        assert prior_kl_regularizer(g, g) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_vs_uniform(self):
        assert prior_kl_regularizer([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)

    @given(simplex)
    def test_uniform_prior_is_shifted_entropy(self, p):
        c = len(p)
        kl = prior_kl_regularizer(p, np.full(c, 1.0 / c))
        assert kl == pytest.approx(uniform_entropy_regularizer(p) + math.log(c), abs=1e-10)

    @given(simplex, st.integers(0, 2**31 - 1))
    def test_matches_direct_sum_and_nonnegative(self, p, seed):
        g = np.random.default_rng(seed).dirichlet(np.ones(len(p))) + 1e-6
        g /= g.sum()
        kl = prior_kl_regularizer(p, g)
        assert kl == pytest.approx(kl_oracle(p, g), abs=1e-10)
        assert kl >= -1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            prior_kl_regularizer([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_zero_prior_entry(self):
        with pytest.raises(InvalidArgumentError):
            prior_kl_regularizer([0.5, 0.5], [1.0, 0.0])

    @pytest.mark.parametrize("g", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0]])
    def test_invalid_priors(self, g):
        with pytest.raises(InvalidArgumentError):
            validate_prior(g)


def _fd_gradient(f, x, eps=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up.flat[i] += eps
        down.flat[i] -= eps
        grad.flat[i] = (f(up) - f(down)) / (2 * eps)
    return grad


@pytest.mark.parametrize("kind", ["uniform", "prior"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    for _ in range(20):
        b, c = rng.integers(2, 9), rng.integers(2, 7)
        logits = rng.normal(size=(b, c))
        g = rng.dirichlet(np.ones(c)) * 0.9 + 0.1 / c

        def loss(z):
            z = torch.as_tensor(z)
            p_bar = batch_mean_prediction(torch.softmax(z, dim=1))
            return prior_kl_regularizer(p_bar, g) if kind == "prior" else uniform_entropy_regularizer(p_bar)

        z = torch.tensor(logits, requires_grad=True)
        loss(z).backward()
        fd = _fd_gradient(lambda a: float(loss(a)), logits)
        np.testing.assert_allclose(z.grad.numpy(), fd, rtol=1e-5, atol=1e-9)


class TestCombine:
    def test_arithmetic(self):
        out = combine_losses(1.0, 2.0, -4.0, 1.5)
        assert out.total == -3.0
        assert isinstance(out, LossBreakdown)

    def test_lambda_zero(self):
        assert combine_losses(0.7, 0.2, -3.0, 0.0).total == pytest.approx(0.9)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 5))
    def test_total_by_construction(self, ls, lu, le, lam):
        assert combine_losses(ls, lu, le, lam).total == ls + lu + lam * le

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_raises_with_batch_index(self, bad):
        with pytest.raises(DivergedTrainingError) as info:
            combine_losses(1.0, bad, 0.0, batch_index=17)
        assert info.value.batch_index == 17

    def test_tensor_total_keeps_graph(self):
        x = torch.tensor(2.0, requires_grad=True)
        out = combine_losses(x, x * 0, x * 3, 0.5)
        out.total.backward()
        assert x.grad.item() == pytest.approx(2.5)
        assert out.detach().to_dict()["total"] == pytest.approx(5.0)
