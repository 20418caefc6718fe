import numpy as np
import pytest

import idenc.numerics as nx
from idenc.diagnostics import primitive_grad_check
from idenc.numerics import Tensor, default_dtype, grad_check


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def test_add_elementwise():
    np.testing.assert_array_equal(nx.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(nx.matmul(np.eye(3), a).data, a)


def test_softmax_symmetric():
    np.testing.assert_allclose(nx.softmax([0.0, 0.0]).data, [0.5, 0.5])


def test_shape_mismatch_names_op():
    with pytest.raises(nx.ShapeError, match="matmul"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(nx.ShapeError, match="add"):
        nx.add(np.ones(3), np.ones(4))
    with pytest.raises(nx.ShapeError, match="conv2d"):
        nx.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_square_grad():
    w = Tensor(3.0, requires_grad=True)
    nx.backward(w * w)
    assert w.grad == pytest.approx(6.0)


def test_bilinear_grad():
    rng = np.random.default_rng(1)
    a = _param(rng, 3, 4)
    b = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    nx.backward((a * b).sum())
    np.testing.assert_array_equal(a.grad, b.data)


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        nx.backward(w * 2.0)


def test_conv_mse_matches_finite_differences():
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        y = Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = _param(rng, 1, 1, 3, 3)
        rep = grad_check(lambda: nx.square(nx.conv2d(x, w, padding=1) - y).mean(), [w], eps=1e-3)
    assert rep.max_rel_err < 1e-4


def test_grad_check_cubic():
    w = Tensor(2.0, requires_grad=True, dtype=np.float64)
    rep = grad_check(lambda: w * w * w, [w], eps=1e-4)
    assert rep.analytic == pytest.approx(12.0)
    assert rep.numeric == pytest.approx(12.0, rel=1e-6)
    assert rep.max_rel_err < 1e-6


def test_grad_check_constant_function():
    w = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    rep = grad_check(lambda: (w * 0.0).sum() + 5.0, [w])
    assert rep.max_rel_err == 0.0
    assert rep.analytic == 0.0 and rep.numeric == 0.0


def test_grad_check_detects_nondeterminism():
    w = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    rng = np.random.default_rng(0)
    with pytest.raises(nx.NondeterministicFunctionError):
        grad_check(lambda: (w * float(rng.standard_normal())).sum(), [w])


@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-4), (np.float32, 1e-3)])
def test_every_primitive_gradient(dtype, tol):
    reports = primitive_grad_check(dtype)
    assert set(reports) >= {"conv", "conv_strided", "group_norm", "attention", "logsumexp_masked", "softmax"}
    bad = {k: r.max_rel_err for k, r in reports.items() if not r.max_rel_err < tol}
    assert not bad, bad


def test_backward_is_linear_in_losses():
    rng = np.random.default_rng(5)
    w = _param(rng, 3, 3)
    x = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)

    def l1():
        return nx.square(nx.matmul(x, w)).mean()

    def l2():
        return nx.silu(nx.matmul(x, w)).sum()

    nx.backward(l1() + l2())
    joint = w.grad.copy()
    w.grad = None
    nx.backward(l1())
    g1 = w.grad.copy()
    w.grad = None
    nx.backward(l2())
    np.testing.assert_array_equal(joint, g1 + w.grad)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        h = nx.conv2d(x, w, padding=1)
        return nx.group_norm(h, np.ones(4, np.float32), np.zeros(4, np.float32), 2).mean().data

    assert run().tobytes() == run().tobytes()


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = (w * 2.0).sum()
    assert not y.requires_grad and y.op == "leaf"


def test_grad_accumulates_until_zeroed():
    w = Tensor(2.0, requires_grad=True, dtype=np.float64)
    nx.backward(w * w)
    nx.backward(w * w)
    assert w.grad == pytest.approx(8.0)
    nx.zero_grad([w])
    assert w.grad is None


def test_finite_check():
    t = Tensor([1.0, np.nan])
    assert not t.is_finite()
    with pytest.raises(FloatingPointError):
        nx.check_finite(t, "x")
