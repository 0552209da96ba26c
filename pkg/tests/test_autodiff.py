"""Gradient checks for the tape and the Adam reference step."""

import numpy as np
import pytest

from ksxplain.autodiff import Adam, Tensor, cross_entropy_logits


def central_diff(f, x, i, h=1e-6):
    xp = x.copy()
    xm = x.copy()
    xp[i] += h
    xm[i] -= h
    return (f(xp) - f(xm)) / (2 * h)


def check_scalar_fn(f, x0, rtol=1e-6):
    """f maps a flat array to a scalar Tensor; compare grads to central diffs."""
    t = Tensor(x0.copy(), requires_grad=True)
    out = f(t)
    out.backward()
    for i in range(x0.size):
        fd = central_diff(lambda x: float(f(Tensor(x)).data), x0, i)
        assert t.grad.reshape(-1)[i] == pytest.approx(fd, rel=rtol, abs=1e-9)


def test_elementwise_chain():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(0.2, 1.5, size=6)
    check_scalar_fn(lambda t: ((t * 2.0 + 1.0).log() * t.exp()).sum(), x0)


def test_sigmoid_softplus_sqrt():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-2, 2, size=5)
    check_scalar_fn(lambda t: (t.sigmoid() * t.softplus()).sum(), x0)
    x1 = rng.uniform(0.5, 2.0, size=4)
    check_scalar_fn(lambda t: (t * t).sum().sqrt(), x1)


def test_matmul_and_broadcast_bias():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4, 2)).reshape(-1)
    t = Tensor(w0.reshape(4, 2), requires_grad=True)
    bias = Tensor(rng.standard_normal(2), requires_grad=True)
    out = ((Tensor(a) @ t) + bias).relu().sum()
    out.backward()
    for i in range(8):
        fd = central_diff(
            lambda w: float(((Tensor(a) @ Tensor(w.reshape(4, 2))) + bias.data)
                            .relu().sum().data), w0, i)
        assert t.grad.reshape(-1)[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)
    for i in range(2):
        fd = central_diff(
            lambda b: float(((Tensor(a) @ Tensor(w0.reshape(4, 2))) + Tensor(b))
                            .relu().sum().data),
            bias.data.copy(), i)
        assert bias.grad[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_division_and_maximum_scalar():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(0.5, 2.0, size=5)
    check_scalar_fn(lambda t: (t / t.sum().maximum_scalar(1e-9)).sum()
                    + (t / 3.0).sum(), x0)


def test_getitem_gradient():
    x0 = np.array([1.0, 2.0, 3.0])
    t = Tensor(x0, requires_grad=True)
    out = t[1] * 5.0
    out.backward()
    np.testing.assert_array_equal(t.grad, [0.0, 5.0, 0.0])


def test_cross_entropy_matches_manual():
    logits = np.array([[0.3, -1.2, 2.0]])
    t = Tensor(logits, requires_grad=True)
    loss = cross_entropy_logits(t, 2)
    loss.backward()
    z = logits[0]
    p = np.exp(z - z.max())
    p /= p.sum()
    assert float(loss.data) == pytest.approx(-np.log(p[2]), rel=1e-12)
    expected_grad = p.copy()
    expected_grad[2] -= 1.0
    np.testing.assert_allclose(t.grad[0], expected_grad, rtol=1e-12)


def test_backward_accumulates_through_reuse():
    t = Tensor(np.array([2.0]), requires_grad=True)
    out = t * t + t * 3.0   # d/dt = 2t + 3 = 7
    out.sum().backward()
    assert t.grad[0] == pytest.approx(7.0)


def test_adam_first_step_matches_formula():
    opt = Adam(size=2, lr=0.1)
    params = np.array([1.0, -1.0])
    grad = np.array([0.5, -2.0])
    new = opt.step(params, grad)
    # first step: mhat = grad, vhat = grad^2 -> update = lr * sign(grad) approx
    expected = params - 0.1 * grad / (np.abs(grad) + 1e-8)
    np.testing.assert_allclose(new, expected, rtol=1e-6)


def test_adam_weight_decay_adds_l2_term():
    opt = Adam(size=1, lr=0.1, weight_decay=0.5)
    params = np.array([2.0])
    new = opt.step(params, np.zeros(1))
    # effective gradient 0.5 * 2.0 = 1.0
    assert new[0] < params[0]
