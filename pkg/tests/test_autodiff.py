import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bnseq import autodiff as ad
from bnseq.autodiff import Tensor
from bnseq.errors import DomainError, ShapeError
from bnseq.gradcheck import check_gradients, numerical_grad, relative_error


def test_add_and_relu_examples():
    np.testing.assert_array_equal(ad.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal(ad.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_elementwise_dispatch():
    a, b = Tensor([2.0, 3.0]), Tensor([4.0, 6.0])
    np.testing.assert_allclose(ad.elementwise("div", b, a).data, [2.0, 2.0])
    np.testing.assert_allclose(ad.elementwise("log", Tensor([1.0])).data, [0.0])
    with pytest.raises(ValueError):
        ad.elementwise("add", a)
    with pytest.raises(ValueError):
        ad.elementwise("frobnicate", a)


def test_broadcast_mul_gradcheck():
    a = Tensor([0.7, -1.3], requires_grad=True)
    b = Tensor([[1.0, 1.0], [1.0, 1.0]], requires_grad=True)
    w = np.array([[0.3, -0.2], [1.1, 0.5]])
    assert check_gradients(lambda: ((a * b) * w).sum(), [a, b]) < 1e-6


def test_shape_and_domain_errors():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(2)))
    with pytest.raises(DomainError) as info:
        ad.log(Tensor([1.0, 2.0, -1.0]))
    assert info.value.index == (2,)
    with pytest.raises(DomainError) as info:
        ad.div(Tensor([[1.0, 1.0], [1.0, 1.0]]), Tensor([[1.0, 1.0], [0.0, 1.0]]))
    assert info.value.index == (1, 0)


def test_matmul_examples():
    eye = Tensor(np.eye(3))
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal((x @ eye).data, x.data)
    np.testing.assert_array_equal((Tensor([[1, 2], [3, 4]]) @ Tensor([[1], [1]])).data, [[3], [7]])
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 2)))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(3, 2))
    assert check_gradients(lambda: ((a @ b) * w).sum(), [a, b]) < 1e-6


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    assert check_gradients(lambda: ((a @ b) ** 2).sum() + ((a @ c).tanh()).sum(), [a, b, c]) < 1e-6


def test_reduce_examples():
    x = Tensor([1.0, 2.0, 3.0, 4.0])
    assert x.mean().item() == 2.5
    assert x.var().item() == 1.25
    assert Tensor(np.full((3, 2), 7.0)).var().item() == 0.0
    with pytest.raises(ValueError):
        ad.reduce("sum", x, axes=())


def test_max_breaks_ties_toward_lowest_index():
    x = Tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]], requires_grad=True)
    x.max(axes=1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


@pytest.mark.parametrize("op", ["sum", "mean", "var", "max"])
@pytest.mark.parametrize("axes,keepdims", [((0,), False), ((1, 2), True), (None, False), ((0, 2), False)])
def test_reduce_gradcheck(op, axes, keepdims):
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    out_shape = ad.reduce(op, x, axes, keepdims).shape
    w = rng.normal(size=out_shape)
    assert check_gradients(lambda: (ad.reduce(op, x, axes, keepdims) * w).sum(), [x]) < 1e-4


@pytest.mark.parametrize("fn", [ad.relu, ad.sigmoid, ad.tanh, ad.exp,
                                lambda t: ad.log(t * t + 1.0), lambda t: ad.sqrt(t * t + 0.5),
                                lambda t: ad.softmax(t), lambda t: ad.log_softmax(t),
                                lambda t: ad.smooth_l1(t, np.linspace(-1.5, 1.5, 12).reshape(4, 3)),
                                lambda t: t ** 3, lambda t: 1.0 / (t * t + 1.0) - t])
def test_unary_gradcheck(fn):
    rng = np.random.default_rng(3)
    # keep away from the relu kink
    data = rng.normal(size=(4, 3))
    data[np.abs(data) < 0.05] = 0.3
    x = Tensor(data, requires_grad=True)
    w = rng.normal(size=(4, 3))
    assert check_gradients(lambda: (fn(x) * w).sum(), [x]) < 1e-4


def test_shape_ops_gradcheck():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

    def fn():
        z = ad.concat([x.transpose(2, 0, 1), y.transpose(2, 0, 1)], axis=1)
        s = ad.stack([z[:, 0], z[:, 3] * 2.0], axis=-1)
        return (s.reshape(-1) ** 2).sum() + x[0, [0, 0, 2], 1].sum()

    assert check_gradients(fn, [x, y]) < 1e-6


def test_backward_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([1.0, 2.0], requires_grad=True)
    ((x * x).mean() / 2.0).backward()
    np.testing.assert_allclose(x.grad, [0.5, 1.0], rtol=0, atol=1e-15)

    with pytest.raises(ValueError):
        Tensor([1.0, 2.0], requires_grad=True).backward()


def test_shared_subexpression_accumulates_fully():
    x = Tensor([1.5, -2.0], requires_grad=True)
    y = x * x
    loss = (y + y * x + y).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data + 3 * x.data ** 2)
    assert y.grad is not None and y.grad.shape == y.shape


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    grads = []
    for _ in range(2):
        a.grad = b.grad = None
        ad.log_softmax((a @ b).tanh()).mean().backward()
        grads.append((a.grad.copy(), b.grad.copy()))
    assert np.array_equal(grads[0][0], grads[1][0]) and np.array_equal(grads[0][1], grads[1][1])


def test_detach_severs_and_preserves_values():
    x = Tensor([1.0, 2.0], requires_grad=True)
    h = x * 3.0
    d = ad.detach(h)
    assert d.data is h.data or np.array_equal(d.data, h.data)
    loss = (d * x).sum()
    loss.backward()
    # only the direct route through x survives: d/dx (d*x) = d
    np.testing.assert_array_equal(x.grad, h.data)
    assert not d.requires_grad


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_finite_difference_oracle_itself():
    x = Tensor([0.3, -0.7])
    g = numerical_grad(lambda: (x * x * x).sum(), x)
    np.testing.assert_allclose(g, 3 * x.data ** 2, rtol=1e-8)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 1), elements=st.floats(-3, 3)),
       arrays(np.float64, (1, 4), elements=st.floats(-3, 3)))
def test_broadcast_grad_equals_tiled_grad(a_data, b_data):
    a = Tensor(a_data, requires_grad=True)
    b = Tensor(b_data, requires_grad=True)
    w = np.arange(12.0).reshape(3, 4)
    (a * b * w).sum().backward()
    at = Tensor(np.tile(a_data, (1, 4)), requires_grad=True)
    bt = Tensor(np.tile(b_data, (3, 1)), requires_grad=True)
    (at * bt * w).sum().backward()
    np.testing.assert_allclose(a.grad, at.grad.sum(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(b.grad, bt.grad.sum(axis=0, keepdims=True), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_random_composite_gradcheck(data):
    x = Tensor(data, requires_grad=True)
    w = np.array([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]])
    fn = lambda: (ad.sigmoid(x * w) * ad.tanh(x + 0.5)).mean() + ad.exp(x * 0.3).var()
    assert check_gradients(fn, [x]) < 1e-4
