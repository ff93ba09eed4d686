import copy

import numpy as np
import pytest

from sdsc.tensor import (NonFiniteError, Rng, ShapeError, Tape, Tensor, backward, grad, log, matmul, random_init,
                         relu)


def test_ops_match_numpy_forward():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_allclose((ta + tb).data, a + b, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose((ta * tb - tb).data, a * b - b, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose((ta @ Tensor(a.T)).data, a @ a.T, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(ta.sum(axis=0).data, a.sum(axis=0), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(ta[1:, ::2].data, a[1:, ::2].astype(np.float32))


def test_broadcast_gradient_is_summed_back():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((4,)), requires_grad=True)
    with Tape() as tape:
        loss = (a * b).sum()
    g = grad(tape, loss)
    assert g[b.id].shape == (4,)
    np.testing.assert_array_equal(g[b.id].data, np.full(4, 3.0))


def test_reused_tensor_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = (x * x + x).sum()
    assert grad(tape, y)[x.id].item() == pytest.approx(5.0)


def test_backward_fills_leaf_grad():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with Tape() as tape:
        y = relu(x).sum()
    backward(tape, y)
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2
    assert not y.requires_grad


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ShapeError):
        grad(tape, y)


def test_loss_off_tape():
    with Tape() as tape:
        pass
    assert grad(tape, Tensor(1.0)) == {}


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.zeros(2)))


def test_item_requires_single_element():
    assert Tensor([[3.5]]).item() == 3.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_deepcopy_gets_fresh_id():
    t = Tensor(np.ones(2), requires_grad=True)
    c = copy.deepcopy(t)
    assert c.id != t.id
    c.data[0] = 5
    assert t.data[0] == 1


def test_rng_children_are_independent_and_reproducible():
    a, b = Rng(3).child(0), Rng(3).child(1)
    assert not np.array_equal(a.normal(size=5), b.normal(size=5))
    np.testing.assert_array_equal(Rng(3).child(1).normal(size=5), Rng(3).child(1).normal(size=5))


def test_random_init_bound():
    w = random_init((64, 9), 9, Rng(0))
    assert np.abs(w.data).max() <= np.sqrt(6 / 9)
    with pytest.raises(ValueError):
        random_init((2, 2), 0, Rng(0))
