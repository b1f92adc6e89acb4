import numpy as np
import pytest

from xlingdef.numcore import AdamState, Tensor, adam_step, clip_global_norm


def test_first_step_moves_by_about_lr():
    # with g=1 the bias-corrected moments are exactly 1, so the first
    # update is -lr / (1 + eps)
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    st = AdamState(lr=0.1)
    adam_step(p, {"w": np.ones(3)}, st)
    assert np.allclose(p["w"].data, -0.1, rtol=1e-7)
    assert st.step_count == 1


def test_zero_grad_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st = AdamState(lr=0.5)
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(2)}, st)
    assert np.array_equal(p["w"].data, before)
    assert np.array_equal(st.m["w"], np.zeros(2))
    assert np.array_equal(st.v["w"], np.zeros(2))


def test_shape_mismatch_raises():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.ones(4)}, AdamState())


def test_convergence_on_quadratic():
    # minimize (w - 3)^2; Adam should get close within a few hundred steps
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    st = AdamState(lr=0.05)
    for _ in range(500):
        g = 2.0 * (p["w"].data - 3.0)
        adam_step(p, {"w": g}, st)
    assert abs(p["w"].data[0] - 3.0) < 1e-2


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_global_norm(grads, 1.0)
    assert abs(norm - 5.0) < 1e-12
    assert np.allclose(grads["a"], 0.6) and np.allclose(grads["b"], 0.8)
    # below the cap nothing changes
    grads2 = {"a": np.array([0.3])}
    norm2 = clip_global_norm(grads2, 1.0)
    assert abs(norm2 - 0.3) < 1e-12 and grads2["a"][0] == 0.3
