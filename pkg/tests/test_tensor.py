import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf

from momo import tensor as T
from momo.gradcheck import grad_check, op_cases


@pytest.fixture
def f64():
    # exact-value checks run in double precision
    with T.precision("f64"):
        yield


def tensor(x, grad=True):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                     elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False))


# -- matmul -------------------------------------------------------------------

def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(T.matmul(tensor(np.eye(2)), tensor(m)).data, m)
    out = T.matmul(tensor([[1.0, 0], [0, 0]]), tensor([[5.0, 6], [7, 8]]))
    assert np.array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(tensor(np.ones((3, 4))), tensor(np.ones((3, 2))))


def test_matmul_gradient_matches_transposes(f64):
    rng = np.random.default_rng(0)
    a, b = tensor(rng.standard_normal((3, 4))), tensor(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    T.tsum(T.matmul(a, b) * T.Tensor(g)).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_sum_gradient_finite_difference_f32():
    rng = np.random.default_rng(1)
    a = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    b = T.Tensor(rng.standard_normal((4, 2)).astype(np.float32), requires_grad=True)
    assert grad_check(lambda x, y: T.tsum(T.matmul(x, y)), [a, b], 1e-3).passed


# -- softmax ------------------------------------------------------------------

def test_softmax_examples(f64):
    np.testing.assert_allclose(T.softmax(tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-12)
    out = T.softmax(tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    with T.precision("f64"):
        p = T.softmax(tensor(x, grad=False)).data
        shifted = T.softmax(tensor(x + c, grad=False)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(shifted, p, atol=1e-9)


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_examples():
    ones, zeros = tensor(np.ones(4)), tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(tensor(np.full((1, 4), 3.0)), ones, zeros).data, np.zeros((1, 4)))
    out = T.layer_norm(tensor([[1.0, -1.0]]), tensor(np.ones(2)), tensor(np.zeros(2)), eps=1e-12).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_layer_norm_row_statistics(x):
    d = x.shape[1]
    out = T.layer_norm(tensor(x, grad=False), tensor(np.ones(d)), tensor(np.zeros(d))).data
    for row_in, row in zip(x, out):
        if np.var(row_in) > 1e-2:
            assert abs(row.mean()) <= 1e-5
            assert abs(row.var() - 1.0) <= 1e-3


def test_layer_norm_gradient_2x8():
    rng = np.random.default_rng(2)
    f32 = np.float32
    x = T.Tensor(rng.standard_normal((2, 8)).astype(f32), requires_grad=True)
    g = T.Tensor(rng.standard_normal(8).astype(f32), requires_grad=True)
    b = T.Tensor(rng.standard_normal(8).astype(f32), requires_grad=True)
    w = T.Tensor(rng.standard_normal((2, 8)).astype(f32))
    report = grad_check(lambda x, g, b: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b], 1e-3)
    assert report.passed, report


# -- gelu ---------------------------------------------------------------------

@pytest.mark.parametrize("prec", ["f32", "f64"])
def test_gelu_examples(prec):
    dt = np.float32 if prec == "f32" else np.float64
    out = T.gelu(T.Tensor(np.array([0.0, 10.0, 1.0], dtype=dt))).data
    assert out[0] == 0.0
    assert abs(out[1] - 10.0) < 1e-5
    assert abs(out[2] - 0.8413447460685429) < 1e-6


def test_gelu_float32_erf_agrees_with_reference():
    x = np.linspace(-8, 8, 100001).astype(np.float32)
    ref = x.astype(np.float64) * 0.5 * (1 + erf(x.astype(np.float64) / np.sqrt(2)))
    np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, ref, atol=2e-6)


# -- cross entropy / mse ------------------------------------------------------

def test_cross_entropy_examples(f64):
    assert abs(T.cross_entropy(tensor(np.zeros((3, 16))), [0, 5, 15]).item() - math.log(16)) < 1e-12
    assert T.cross_entropy(tensor([[60.0, 0.0, 0.0]]), [0]).item() < 1e-20
    assert abs(T.cross_entropy(tensor([[1.0, 0.0, 0.0]]), [0]).item() - 0.5514) < 1e-4
    assert abs(T.cross_entropy(tensor([[1.0, 0.0, 0.0]]), [0]).item() + math.log(math.e / (math.e + 2))) < 1e-12


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        T.cross_entropy(tensor(np.zeros((2, 4))), [0, 4])
    with pytest.raises(IndexError):
        T.cross_entropy(tensor(np.zeros((2, 4))), [-1, 0])


def test_mse_examples():
    x = tensor(np.arange(6.0).reshape(2, 3))
    assert T.mse(x, x.data).item() == 0.0
    assert T.mse(x, x.data - 1).item() == 1.0
    assert T.mse(tensor([0.0, 2.0]), [1.0, 0.0]).item() == 2.5
    with pytest.raises(ValueError):
        T.mse(tensor([0.0, 2.0]), [1.0, 0.0, 3.0])


# -- backward -----------------------------------------------------------------

def test_backward_examples():
    x = tensor([1.0, 2.0, 3.0])
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    y = tensor([1.0, 2.0])
    T.tsum(y * y).backward()
    assert np.array_equal(y.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        (tensor([1.0, 2.0]) * 2.0).backward()


def test_backward_accumulates_additively():
    rng = np.random.default_rng(3)
    w = tensor(rng.standard_normal((4, 3)))
    x = T.Tensor(rng.standard_normal((5, 4)))
    loss_a = lambda: T.tsum(T.tanh(T.matmul(x, w)))  # noqa: E731
    loss_b = lambda: T.tmean(T.exp(T.matmul(x, w) * 0.1))  # noqa: E731
    loss_a().backward()
    ga = w.grad.copy()
    w.grad = None
    loss_b().backward()
    gb = w.grad.copy()
    w.grad = None
    loss_a().backward()
    loss_b().backward()
    assert np.array_equal(w.grad, ga + gb)


def test_each_node_visited_once_on_shared_subgraph():
    x = tensor([3.0])
    h = x * x
    T.tsum(h + h + h).backward()
    np.testing.assert_allclose(x.grad, [18.0])


def test_no_grad_records_nothing():
    x = tensor([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setattr(T, "DEBUG", True)
    with pytest.raises(FloatingPointError):
        T.exp(tensor([1000.0]))


def test_broadcasting_limited_to_trailing_bias():
    with pytest.raises(ValueError):
        tensor(np.ones((2, 3))) + tensor(np.ones((2, 1)))
    out = tensor(np.ones((2, 3))) + tensor(np.arange(3.0))
    assert out.shape == (2, 3)


def test_precision_switch():
    with T.precision("f64"):
        assert T.parameter(np.zeros(2)).dtype == np.float64
    assert T.parameter(np.zeros(2)).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision("f16")


# -- grad check ---------------------------------------------------------------

def test_grad_check_passes_on_mse():
    rng = np.random.default_rng(4)
    a = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    b = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    assert grad_check(lambda p, q: T.mse(p, q), [a, b], 1e-3).passed


def test_grad_check_detects_wrong_backward():
    def bad_square(x):
        return T._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    x = tensor([0.5, -1.0, 2.0])
    report = grad_check(lambda v: T.tsum(bad_square(v)), [x], 1e-3)
    assert not report.passed
    assert "FAIL" in str(report)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_op_passes_f64_on_three_random_draws(seed):
    with T.precision("f64"):
        for name, f, inputs in op_cases(seed):
            report = grad_check(f, inputs, 1e-5)
            assert report.passed, f"{name}: {report}"
