import numpy as np
import pytest

from xlingdef.numcore import Graph, GraphConsumedError, Tensor, backward, ops


def test_tensor_is_f64_contiguous():
    t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3))
    assert t.data.dtype == np.float64
    assert t.data.flags.c_contiguous
    v = Tensor(np.asfortranarray(np.ones((3, 4))))
    assert v.data.flags.c_contiguous


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = ops.scale(x, 2.0)
        with pytest.raises(ValueError):
            backward(y, g)


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = ops.sum_axis(ops.scale(x, 2.0))
        backward(y, g)
        with pytest.raises(GraphConsumedError):
            backward(y, g)
    assert np.allclose(x.grad, 2.0)


def test_forward_without_graph_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.scale(x, 2.0)
    assert y.grad is None and x.grad is None
    with Graph() as g:
        z = ops.sum_axis(ops.scale(x, 3.0))
        backward(z, g)
    assert np.allclose(x.grad, 3.0)


def test_grad_accumulates_across_uses():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Graph() as g:
        y = ops.sum_axis(ops.add(x, x))
        backward(y, g)
    assert np.allclose(x.grad, [2.0, 2.0])


def test_unused_branch_gets_no_grad():
    # forward-only side computation on the same tape must not affect grads
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Graph() as g:
        main = ops.sum_axis(ops.scale(x, 5.0))
        side = ops.sum_axis(ops.square(x))  # never backpropagated
        backward(main, g)
    assert side.grad is None
    assert np.allclose(x.grad, 5.0)


def test_zero_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        backward(ops.sum_axis(x), g)
    assert x.grad is not None
    x.zero_grad()
    assert x.grad is None
