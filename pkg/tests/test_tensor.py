import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flagdit.tensor import (
    GradientError,
    ShapeError,
    Tensor,
    concat,
    embedding,
    finite_diff_grad,
    matmul,
    no_grad,
    parameter,
    precision,
    rms_norm,
    softmax_lastdim,
)
from oracles import loop_matmul, softmax64

finite = st.floats(-10, 10, allow_nan=False, width=32)


def test_matmul_identity_and_dot():
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    out = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, loop_matmul(a.astype(np.float32), b.astype(np.float32)),
                               atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward():
    rng = np.random.default_rng(1)
    a, b = parameter(rng.standard_normal((3, 4))), parameter(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2)).astype(np.float32)
    (matmul(a, b) * Tensor(g)).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-5)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-5)


def test_batched_matmul_with_2d_right_operand_backward():
    rng = np.random.default_rng(2)
    with precision(np.float64):
        a = parameter(rng.standard_normal((2, 3, 4)))
        b = parameter(rng.standard_normal((4, 5)))
        (matmul(a, b).square()).sum().backward()
        fa = finite_diff_grad(lambda v: float(np.sum((v @ b.data) ** 2)), a.data)
        fb = finite_diff_grad(lambda v: float(np.sum((a.data @ v) ** 2)), b.data)
    np.testing.assert_allclose(a.grad, fa, rtol=1e-6)
    np.testing.assert_allclose(b.grad, fb, rtol=1e-6)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_lastdim(Tensor(np.zeros(4))).data, 0.25)
    out = softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_matches_float64_oracle():
    row = np.random.default_rng(3).standard_normal(8).astype(np.float32)
    np.testing.assert_allclose(softmax_lastdim(Tensor(row)).data, softmax64(row), atol=1e-6)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)
    assert np.all(out >= 0)


def test_softmax_mask_removes_entries():
    x = Tensor(np.zeros((1, 4)))
    out = softmax_lastdim(x, np.array([[True, False, True, False]])).data
    np.testing.assert_allclose(out, [[0.5, 0, 0.5, 0]])


def test_rms_norm_examples():
    ones = Tensor(np.ones(4))
    np.testing.assert_allclose(rms_norm(Tensor([2.0, 2, 2, 2]), ones, eps=1e-12).data, 1.0,
                               rtol=1e-6)
    np.testing.assert_array_equal(rms_norm(Tensor(np.zeros(4)), ones).data, 0.0)
    x = np.random.default_rng(4).standard_normal(16)
    y = rms_norm(Tensor(x), Tensor(np.ones(16))).data
    assert np.sqrt(np.mean(y.astype(np.float64) ** 2)) == pytest.approx(1.0, abs=1e-5)


@settings(max_examples=40)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 12)), elements=finite))
def test_rms_norm_output_finite_and_bounded(x):
    y = rms_norm(Tensor(x), Tensor(np.ones(x.shape[-1]))).data
    assert np.all(np.isfinite(y))
    assert np.all(np.abs(y) <= np.sqrt(x.shape[-1]) + 1e-4)


def test_backward_simple_losses():
    x = parameter(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = parameter([1.0, -2.0, 3.0])
    (y.square().sum() / 2.0).backward()
    np.testing.assert_allclose(y.grad, y.data)


def test_backward_accumulates():
    x = parameter([1.0, 2.0])
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = parameter([1.0, 2.0])
    with pytest.raises(GradientError):
        (x * 2.0).backward()


def test_diamond_graph_visits_each_node_once():
    x = parameter([3.0])
    y = x * x
    z = y + y  # y reached twice
    z.sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        w = parameter(rng.standard_normal((4, 4)))
        g = parameter(rng.standard_normal(4))
        x = rng.standard_normal((3, 4))

        def f(wv, gv):
            t = rms_norm(matmul(Tensor(x), wv), gv)
            return (softmax_lastdim(t) * Tensor(np.arange(4.0))).sum()

        f(w, g).backward()
        fw = finite_diff_grad(lambda v: f(Tensor(v), g).item(), w.data, h=1e-5)
        fg = finite_diff_grad(lambda v: f(w, Tensor(v)).item(), g.data, h=1e-5)
    np.testing.assert_allclose(w.grad, fw, atol=1e-8)
    np.testing.assert_allclose(g.grad, fg, atol=1e-8)


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda v: v.sum(), np.ones((2, 2))), 1.0)
    np.testing.assert_allclose(finite_diff_grad(lambda v: v[0] * v[1], np.array([3.0, 5.0])),
                               [5.0, 3.0], atol=1e-4)


def test_no_grad_records_nothing():
    x = parameter([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._node is None


def test_slice_concat_embedding_gradients():
    with precision(np.float64):
        a = parameter(np.arange(6.0).reshape(2, 3))
        b = parameter(np.ones((1, 3)))
        c = concat([a, b], axis=0)
        (c[1:] * Tensor(np.arange(6.0).reshape(2, 3))).sum().backward()
    np.testing.assert_array_equal(a.grad, [[0, 0, 0], [0, 1, 2]])
    np.testing.assert_array_equal(b.grad, [[3, 4, 5]])
    table = parameter(np.zeros((3, 2)))
    embedding(table, np.array([0, 2, 2])).sum().backward()
    np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])
    with pytest.raises(IndexError):
        embedding(table, np.array([3]))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_shape_and_grad_invariants(shape):
    x = parameter(np.random.default_rng(len(shape)).standard_normal(shape))
    assert x.data.size == int(np.prod(shape))
    (x.tanh() * x.silu()).sum().backward()
    assert x.grad.shape == x.shape
    assert np.all(np.isfinite(x.grad))
