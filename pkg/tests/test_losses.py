import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msfiqa.losses import (
    EXP_CLAMP,
    PairBatch,
    rank_loss,
    rank_loss_grad,
    regression_loss,
    regression_loss_grad,
    total_loss,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def test_regression_zero_at_perfect_prediction():
    y = t([0.3, -1.0, 2.5, 7.0])
    assert regression_loss(y, y.clone()).item() == 0.0


def test_regression_worked_example():
    assert regression_loss(t([1.0, 3.0]), t([0.0, 0.0])).item() == pytest.approx(2.5, abs=1e-15)


def test_regression_homogeneity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.normal(size=8)
        r = rng.normal(size=8)
        base = regression_loss(t(y + r), t(y)).item()
        doubled = regression_loss(t(y + 2 * r), t(y)).item()
        assert doubled == pytest.approx(4 * base, rel=1e-12)


def test_rank_other_branch_is_zero():
    for pred in ([5.0, -5.0], [-3.0, 3.0], [0.0, 0.0]):
        assert rank_loss(t(pred), t([1.0, 0.0])).item() == 0.0


def test_rank_worked_examples():
    assert rank_loss(t([0.0, 0.0]), t([0.0, 1.0])).item() == pytest.approx(1.0, abs=1e-15)
    val = rank_loss(t([0.5, 0.2, 1.0, 1.0]), t([0.0, 1.0, 5.0, 2.0])).item()
    assert val == pytest.approx(0.5 * math.exp(0.3), abs=1e-12)
    assert val == pytest.approx(0.67493, abs=1e-5)


def test_rank_ties_contribute_nothing():
    assert rank_loss(t([0.0, 1.0, 9.0, -9.0]), t([0.4, 0.4, 2.0, 2.0])).item() == 0.0


def test_total_worked_example():
    rec = total_loss(t([0.0, 0.0]), t([0.0, 1.0]))
    assert rec.reg.item() == pytest.approx(0.25)
    assert rec.rank.item() == pytest.approx(1.0)
    assert rec.total.item() == pytest.approx(1.25)
    zero = total_loss(t([1.0, 0.0]), t([1.0, 0.0]))
    assert zero.total.item() == 0.0


def test_total_is_exact_sum():
    rng = np.random.default_rng(1)
    p, y = rng.normal(size=10), rng.normal(size=10)
    rec = total_loss(t(p), t(y))
    assert rec.total.item() == rec.reg.item() + rec.rank.item()


def test_total_gradient_is_sum_of_term_gradients():
    rng = np.random.default_rng(2)
    p, y = rng.normal(size=6), rng.normal(size=6)
    g_total = regression_loss_grad(p, y) + rank_loss_grad(p, y)
    x = t(p).requires_grad_()
    total_loss(x, t(y)).total.backward()
    np.testing.assert_allclose(x.grad.numpy(), g_total, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(50))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = 2 * int(rng.integers(1, 9))
    p, y = rng.normal(size=n), rng.normal(size=n)
    for loss, grad in ((regression_loss, regression_loss_grad), (rank_loss, rank_loss_grad)):
        fd = central_diff(lambda v: loss(t(v), t(y)).item(), p)
        x = t(p).requires_grad_()
        loss(x, t(y)).backward()
        assert rel_err(x.grad.numpy(), fd) < 1e-6
        assert rel_err(grad(p, y), fd) < 1e-6


def test_rank_monotone_in_prediction_gap():
    gaps = np.linspace(-20, 20, 81)
    vals = [rank_loss(t([0.0, g]), t([0.0, 1.0])).item() for g in gaps]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-8
    assert vals[0] > 1e8


def test_rank_clamp_keeps_values_finite():
    x = t([1000.0, 0.0]).requires_grad_()
    val = rank_loss(x, t([0.0, 1.0]))
    val.backward()
    assert val.item() == pytest.approx(math.exp(EXP_CLAMP))
    assert torch.isfinite(x.grad).all()
    assert x.grad[0].item() == pytest.approx(math.exp(EXP_CLAMP))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(-5, 5))
def test_rank_invariant_to_per_pair_constant(pairs, seed, c):
    rng = np.random.default_rng(seed)
    p, y = rng.normal(size=2 * pairs), rng.normal(size=2 * pairs)
    shift = np.repeat(rng.normal(size=pairs) * c, 2)
    assert rank_loss(t(p + shift), t(y)).item() == pytest.approx(rank_loss(t(p), t(y)).item(), rel=1e-9)


def test_regression_permutation_invariant_rank_positional():
    p = np.array([0.1, 0.9, 0.4, 0.2])
    y = np.array([0.0, 1.0, 0.5, 0.3])
    perm = [1, 0, 3, 2]
    assert regression_loss(t(p[perm]), t(y[perm])).item() == pytest.approx(regression_loss(t(p), t(y)).item())
    assert rank_loss(t(p[perm]), t(y[perm])).item() != pytest.approx(rank_loss(t(p), t(y)).item())


@pytest.mark.parametrize("pred,target", [([0.0], [1.0]), ([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]),
                                         ([0.0, float("nan")], [0.0, 1.0]), ([0.0, 1.0], [0.0])])
def test_invalid_batches_rejected(pred, target):
    with pytest.raises(ValueError):
        PairBatch(pred, target)
