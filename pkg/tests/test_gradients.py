"""Finite-difference checks for every differentiable op (central
differences, f64, h=1e-5, rel err <= 1e-5)."""

import numpy as np
import pytest

from xlingdef.numcore import Tensor, grad_check, ops

H = 1e-5
TOL = 1e-5


def _check(build, params: dict, seed: int = 0):
    # fixed random weights turn any op output into an informative scalar;
    # drawn once so repeated model_fn calls see the same loss surface
    weights = {}

    def fn():
        out = build()
        if "w" not in weights:
            weights["w"] = np.random.default_rng(seed + 1).normal(size=out.shape)
        return ops.sum_axis(ops.mul_const(out, weights["w"]))

    report = grad_check(fn, params, tolerance=TOL, h=H)
    assert report.passed, str(report)


def test_grad_add_sub_mul():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    _check(lambda: ops.add(a, b), {"a": a, "b": b})
    _check(lambda: ops.sub(a, b), {"a": a, "b": b})
    _check(lambda: ops.mul(a, b), {"a": a, "b": b})


def test_grad_scale_neg_square_relu():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(5,)) + 0.3, requires_grad=True)  # off the relu kink
    _check(lambda: ops.scale(a, -2.5), {"a": a})
    _check(lambda: ops.neg(a), {"a": a})
    _check(lambda: ops.square(a), {"a": a})
    _check(lambda: ops.relu(a), {"a": a})


def test_grad_sqrt():
    rng = np.random.default_rng(2)
    a = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
    _check(lambda: ops.sqrt(a), {"a": a})


def test_grad_matmul_batched():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    _check(lambda: ops.matmul(a, b), {"a": a, "b": b})


def test_grad_matmul_broadcast():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    _check(lambda: ops.matmul(a, b), {"a": a, "b": b})


def test_grad_linear():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=(6,)), requires_grad=True)
    _check(lambda: ops.linear(x, w, b), {"x": x, "w": w, "b": b})


def test_grad_softmax():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(3, 7)), requires_grad=True)
    _check(lambda: ops.softmax(a), {"a": a})


def test_grad_masked_softmax():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    mask = np.where(np.arange(5) >= 3, -1e30, 0.0)
    _check(lambda: ops.masked_softmax(a, mask), {"a": a})


def test_grad_layer_norm():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    gain = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
    bias = Tensor(rng.normal(size=6), requires_grad=True)
    _check(lambda: ops.layer_norm(x, gain, bias), {"x": x, "gain": gain, "bias": bias})


def test_grad_cross_entropy():
    rng = np.random.default_rng(9)
    lg = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
    tg = np.array([1, 5, 0, 7, 0, 3])

    def fn():
        return ops.cross_entropy(lg, tg, pad_index=0)

    report = grad_check(fn, {"logits": lg}, tolerance=TOL, h=H)
    assert report.passed, str(report)


def test_grad_embedding():
    rng = np.random.default_rng(10)
    table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    ids = np.array([[0, 2], [2, 4]])
    _check(lambda: ops.embedding(table, ids), {"table": table})


def test_grad_reductions():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    _check(lambda: ops.sum_axis(a, axis=1), {"a": a})
    _check(lambda: ops.mean_axis(a, axis=0), {"a": a})
    _check(lambda: ops.mean_axis(a, axis=1, keepdims=True), {"a": a})
    _check(lambda: ops.max_axis(a, axis=1), {"a": a})


def test_grad_shape_ops():
    rng = np.random.default_rng(12)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
    _check(lambda: ops.reshape(a, (6, 4)), {"a": a})
    _check(lambda: ops.transpose_last2(a), {"a": a})
    _check(lambda: ops.concat([a, b], axis=1), {"a": a, "b": b})
    _check(lambda: ops.slice_axis(a, 1, 1, 3), {"a": a})
    _check(lambda: ops.index_axis(a, 1, 2), {"a": a})
    _check(lambda: ops.broadcast_rows(ops.reshape(a, (6, 4)), 3), {"a": a})


def test_grad_composite_chain():
    # deep composition to catch accumulation bugs across shared inputs
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w1 = Tensor(rng.normal(size=(6, 6)) * 0.5, requires_grad=True)
    w2 = Tensor(rng.normal(size=(6, 3)) * 0.5, requires_grad=True)
    gain = Tensor(np.ones(6), requires_grad=True)
    bias = Tensor(np.zeros(6), requires_grad=True)
    tg = np.array([1, 0, 2, 2])

    def fn():
        h = ops.linear(x, w1)
        h = ops.layer_norm(ops.add(h, x), gain, bias)
        h = ops.relu(h)
        lg = ops.linear(h, w2)
        return ops.cross_entropy(lg, tg, pad_index=0)

    report = grad_check(fn, {"x": x, "w1": w1, "w2": w2, "gain": gain, "bias": bias},
                        tolerance=TOL, h=H)
    assert report.passed, str(report)
