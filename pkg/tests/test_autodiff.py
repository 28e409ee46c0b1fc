import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mvdet.fusenet.tensor import (Tensor, concat, cross_entropy, log_softmax, mean_join, no_grad, relu,
                                  smooth_l1, smooth_l1_rows, stack, tanh)


def central_diff(f, x: np.ndarray, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def analytic(fn, x: np.ndarray):
    t = Tensor(x.copy(), requires_grad=True)
    fn(t).backward()
    return t.grad


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def test_smooth_l1_values():
    for x, v in ((0.0, 0.0), (1.0, 0.5), (2.0, 1.5), (-2.0, 1.5), (0.5, 0.125)):
        assert float(smooth_l1(Tensor([x])).data) == v
    rows = smooth_l1_rows(Tensor([[0.0, 2.0], [1.0, 0.5]])).data
    np.testing.assert_allclose(rows, [1.5, 0.625])


def test_cross_entropy_values():
    assert float(cross_entropy(Tensor([[100.0, 0.0]]), [0]).data[0]) == pytest.approx(0.0, abs=1e-40)
    assert float(cross_entropy(Tensor([[0.0, 0.0]]), [1]).data[0]) == pytest.approx(math.log(2))
    lp = log_softmax(Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.isfinite(lp).all()


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1.5, (4, 6))
    x[np.abs(np.abs(x) - 1) < 1e-3] += 0.01  # keep clear of the smooth-l1 kink
    assert rel(analytic(smooth_l1, x), central_diff(lambda v: float(smooth_l1(Tensor(v)).data), x)) < 1e-5
    logits = rng.normal(0, 2, (5, 3))
    labels = rng.integers(0, 3, 5)
    f = lambda t: cross_entropy(t, labels).sum()
    assert rel(analytic(f, logits), central_diff(lambda v: float(f(Tensor(v)).data), logits)) < 1e-5


def test_broadcasting_and_reuse():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))

    def fn(t):
        y = t * t + t  # t used twice in the graph
        return (tanh(y @ Tensor(rng_w)) + Tensor(b)[:2].sum()).sum()

    rng_w = rng.normal(size=(4, 2))
    g = analytic(fn, a)
    num = central_diff(lambda v: float(fn(Tensor(v)).data), a)
    assert rel(g, num) < 1e-7

    tb = Tensor(b.copy(), requires_grad=True)
    (Tensor(a) + tb).sum().backward()
    np.testing.assert_allclose(tb.grad, np.full(4, 3.0))


def test_concat_stack_mean_join_gradients():
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(2, 3)) for _ in range(3)]
    ts = [Tensor(x, requires_grad=True) for x in xs]
    w = rng.normal(size=(2, 9))
    (concat(ts, axis=-1) * Tensor(w)).sum().backward()
    np.testing.assert_allclose(np.concatenate([t.grad for t in ts], axis=1), w)
    ts = [Tensor(x, requires_grad=True) for x in xs]
    stack(ts).sum().backward()
    assert all(np.all(t.grad == 1) for t in ts)
    ts = [Tensor(x, requires_grad=True) for x in xs]
    mean_join(ts).sum().backward()
    assert all(np.allclose(t.grad, 1 / 3) for t in ts)
    assert mean_join(ts[:1]) is ts[0]
    with pytest.raises(ValueError):
        mean_join([])


def test_relu_gradient_masks_negative():
    t = Tensor([-1.0, 2.0, 0.5], requires_grad=True)
    relu(t).sum().backward()
    np.testing.assert_array_equal(t.grad, [0, 1, 1])


def test_no_grad_builds_no_graph():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = (t * 3.0).sum()
    assert not y.requires_grad and y._parents == ()
    y2 = (t * 3.0).sum()
    assert y2.requires_grad


def test_deep_chain_no_recursion_limit():
    t = Tensor([1.0], requires_grad=True)
    y = t
    for _ in range(5000):
        y = y + 1.0
    y.sum().backward()
    assert t.grad[0] == 1.0


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor([1.0, 2.0], requires_grad=True).backward()


@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, (2, 4), elements=st.floats(-3, 3)))
def test_matmul_gradient_formula(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (ta @ tb).sum().backward()
    np.testing.assert_allclose(ta.grad, np.ones((3, 4)) @ b.T)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((3, 4)))
