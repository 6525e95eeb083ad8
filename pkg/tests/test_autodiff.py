"""Unit tests for the reverse-mode autodiff engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatmae.autodiff import (ShapeError, Tensor, concatenate, gather,
                               layer_norm, maximum, minimum, softmax, stack,
                               where_const)
from oracles import finite_diff, max_rel_err


def fd_check(fn, arrays, eps=1e-6, tol=1e-5, floor=1e-4):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    numeric = finite_diff(lambda *xs: fn(*[Tensor(x) for x in xs]).item(),
                          [a.copy() for a in arrays], eps=eps)
    for t, num in zip(tensors, numeric):
        assert t.grad is not None
        assert max_rel_err(t.grad, num, floor=floor) < tol


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_constant_root_is_a_noop():
    root = (Tensor([1.0, 2.0]) * 3.0).sum()
    root.backward()  # no grad leaves anywhere; must not raise


def test_matmul_of_ones():
    out = Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 1)))
    np.testing.assert_array_equal(out.data, np.full((2, 1), 3.0))


def test_softmax_uniform():
    out = softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_layer_norm_constant_vector_is_zero():
    out = layer_norm(Tensor([4.0, 4.0, 4.0, 4.0]))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_grad_accumulates_over_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum() + x.sum() * 3.0
    y.backward()
    np.testing.assert_allclose(x.grad, [2.0 + 3.0, 4.0 + 3.0])


def test_linearity_of_backward():
    rng = np.random.default_rng(0)
    a_val = rng.normal(size=(3, 3))

    def grad_of(weight_f, weight_g):
        x = Tensor(a_val, requires_grad=True)
        f = (x * x).sum()
        g = x.exp().sum()
        (weight_f * f + weight_g * g).backward()
        return x.grad

    combined = grad_of(2.0, -0.5)
    np.testing.assert_allclose(combined, 2.0 * grad_of(1.0, 0.0) - 0.5 * grad_of(0.0, 1.0),
                               atol=1e-12)


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_double_backward_raises():
    x = Tensor([1.0], requires_grad=True)
    root = (x * x).sum()
    root.backward()
    with pytest.raises(RuntimeError, match="twice"):
        root.backward()


def test_shape_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_5_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    ws = [rng.normal(size=(4, 8)) / 2, rng.normal(size=(8, 8)) / 2,
          rng.normal(size=(8, 8)) / 2, rng.normal(size=(8, 8)) / 2,
          rng.normal(size=(8, 1)) / 2]
    x = rng.normal(size=(3, 4))

    def mlp(xx, w1, w2, w3, w4, w5):
        h = (xx @ w1).gelu()
        h = (h @ w2).tanh()
        h = (h @ w3).gelu()
        h = (h @ w4).sigmoid()
        return (h @ w5).sum()

    fd_check(mlp, [x] + ws, eps=1e-6, tol=1e-5)


@pytest.mark.parametrize("name,fn,shapes", [
    ("add_broadcast", lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
    ("mul_broadcast", lambda a, b: (a * b * b).sum(), [(2, 3, 4), (3, 1)]),
    ("div", lambda a, b: (a / (b.abs() + 1.0)).sum(), [(3, 3), (3, 3)]),
    ("pow", lambda a: ((a * a + 1.0) ** 1.5).sum(), [(4,)]),
    ("sqrt", lambda a: (a * a + 1.0).sqrt().sum(), [(5,)]),
    ("exp_log", lambda a: (a.exp() + 1.0).log().sum(), [(3, 2)]),
    ("abs", lambda a: a.abs().sum(), [(6,)]),
    ("relu", lambda a: a.relu().sum(), [(6,)]),
    ("min_all", lambda a: a.min() * 2.0, [(3, 4)]),
    ("max_axis", lambda a: a.max(axis=0).sum(), [(3, 4)]),
    ("mean_keepdims", lambda a: (a - a.mean(axis=1, keepdims=True)).abs().sum(), [(3, 4)]),
    ("reshape_transpose", lambda a: (a.reshape(2, 6).transpose() ** 2).sum(), [(3, 4)]),
    ("slice", lambda a: (a[1:, ::2] * 2.0).sum(), [(4, 5)]),
    ("batched_matmul", lambda a, b: ((a @ b) ** 2).sum(), [(2, 3, 4), (4, 2)]),
    ("vec_matmul", lambda a, b: (a @ b).sum(), [(4,), (4, 3)]),
    ("matmul_vec", lambda a, b: (a @ b).sum(), [(2, 3, 4), (4,)]),
])
def test_op_gradients(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 31)
    arrays = [rng.normal(size=s) + 0.1 for s in shapes]
    fd_check(fn, arrays, eps=1e-6, tol=1e-5)


@pytest.mark.parametrize("name,fn,shapes", [
    ("softmax", lambda a: (softmax(a, axis=-1) ** 2).sum(), [(3, 5)]),
    ("layer_norm", lambda a: layer_norm(a).abs().sum(), [(3, 5)]),
    ("maximum", lambda a, b: maximum(a, b).sum(), [(5,), (5,)]),
    ("minimum", lambda a, b: minimum(a, 2.0 * b).sum(), [(5,), (5,)]),
    ("concatenate", lambda a, b: concatenate([a, b], axis=1).sigmoid().sum(),
     [(3, 2), (3, 4)]),
    ("stack", lambda a, b: stack([a, b], axis=1).tanh().sum(), [(4,), (4,)]),
    ("gather", lambda a: gather(a, np.array([0, 2, 2, 1]), axis=0).exp().sum(), [(3, 4)]),
    ("where_const", lambda a: where_const(np.array([True, False, True]), a).sum(), [(3,)]),
])
def test_function_gradients(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 31)
    arrays = [rng.normal(size=s) + 0.05 for s in shapes]
    fd_check(fn, arrays, eps=1e-6, tol=1e-5)


def test_gather_duplicate_indices_accumulate():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    gather(x, np.array([1, 1, 1]), axis=0).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0, 0], [3, 3], [0, 0]])


def test_min_tie_routes_to_first_occurrence():
    x = Tensor([2.0, 1.0, 1.0], requires_grad=True)
    x.min().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_maximum_tie_routes_to_first_operand():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 3.0], requires_grad=True)
    maximum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).detach()
    loss = (y * x).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [1.0, 4.0])  # only the direct factor


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    a_val = rng.normal(size=(6, 6))

    def run():
        x = Tensor(a_val.copy(), requires_grad=True)
        (softmax(x @ x.transpose()) ** 2).sum().backward()
        return x.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-5, max_value=5), min_size=2, max_size=8),
       st.floats(min_value=-3, max_value=3),
       st.floats(min_value=-3, max_value=3))
def test_linearity_property(values, wa, wb):
    arr = np.array(values)

    def grads(ca, cb):
        x = Tensor(arr.copy(), requires_grad=True)
        (ca * (x * x).sum() + cb * x.tanh().sum()).backward()
        return x.grad

    lhs = grads(wa, wb)
    rhs = wa * grads(1.0, 0.0) + wb * grads(0.0, 1.0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
