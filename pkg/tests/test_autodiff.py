import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tavq import autodiff as ad
from tavq.autodiff import Tensor

from conftest import rel_err


def grad_of(f, x0):
    x = ad.parameter(x0)
    return ad.backward(f(x), [x])[x].data


# --------------------------------------------------------------------------
# examples


def test_square_polynomial():
    x = ad.parameter(3.0)
    assert ad.backward(x * x)[x].item() == 6.0


def test_relu_subgradient():
    x = ad.parameter([-1.0, 2.0])
    np.testing.assert_array_equal(ad.backward(ad.sum(ad.relu(x)))[x].data, [0.0, 1.0])


def test_matmul_sum_matches_finite_differences(rng):
    A0, B0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    A, B = ad.parameter(A0), ad.parameter(B0)
    g = ad.backward(ad.sum(A @ B), [A, B])
    fa = ad.finite_diff_grad(lambda a: ad.sum(a @ Tensor(B0)), Tensor(A0))
    fb = ad.finite_diff_grad(lambda b: ad.sum(Tensor(A0) @ b), Tensor(B0))
    assert rel_err(g[A].data, fa.data) < 1e-6
    assert rel_err(g[B].data, fb.data) < 1e-6


def test_finite_diff_quadratic():
    g = ad.finite_diff_grad(lambda x: ad.sum(ad.square(x)), Tensor([1.0, 2.0]))
    np.testing.assert_allclose(g.data, [2.0, 4.0], atol=1e-6)


def test_finite_diff_constant():
    g = ad.finite_diff_grad(lambda x: Tensor(5.0), Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(g.data, np.zeros((2, 3)))


def test_finite_diff_rejects_vector_function():
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda x: x * 2.0, Tensor([1.0, 2.0]))


def test_mean_over_axis_value():
    assert ad.mean_over_axis(Tensor([1.0, 2.0, 3.0]), 0).item() == 2.0


def test_identity_matmul():
    A = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal((Tensor(np.eye(4)) @ Tensor(A)).data, A)


def test_exp_grad_at_zero():
    assert grad_of(ad.exp, 0.0) == 1.0


# --------------------------------------------------------------------------
# errors and graph rules


def test_backward_rejects_non_scalar():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_backward_rejects_detached_loss():
    with pytest.raises(ValueError):
        ad.backward(Tensor(1.0))


def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(ad.NonFiniteError):
        Tensor([np.nan])


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_graph_released_unless_retained():
    x = ad.parameter(2.0)
    y = ad.square(x) * 3.0
    ad.backward(y, retain_graph=True)
    assert ad.backward(y)[x].item() == 12.0
    with pytest.raises(ad.GraphReleasedError):
        ad.backward(y)


def test_detached_tensor_gets_no_gradient():
    x = ad.parameter([1.0, -2.0])
    loss = ad.sum(x * x.detach()) + ad.sum(ad.square(x.detach()))
    np.testing.assert_array_equal(ad.backward(loss, [x])[x].data, [1.0, -2.0])


def test_unreachable_param_zero_gradient():
    x, y = ad.parameter([1.0]), ad.parameter([[1.0, 2.0]])
    g = ad.backward(ad.sum(x * 2.0), [x, y])
    assert set(map(id, g)) == {id(x), id(y)}
    np.testing.assert_array_equal(g[y].data, np.zeros((1, 2)))


def test_gradient_shapes_match_params(rng):
    W = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(np.zeros(4))
    x = Tensor(rng.normal(size=(5, 3)))
    g = ad.backward(ad.mean(ad.relu(x @ W + b)))
    assert g[W].shape == W.shape and g[b].shape == b.shape


def test_linearity_of_backward(rng):
    x0 = rng.normal(size=(4,))
    f1 = lambda x: ad.sum(ad.exp(x * 0.3))          # noqa: E731
    f2 = lambda x: ad.l2_norm(x, axis=0)             # noqa: E731
    x = ad.parameter(x0)
    together = ad.backward(f1(x) + f2(x))[x].data
    np.testing.assert_allclose(together, grad_of(f1, x0) + grad_of(f2, x0), rtol=0, atol=1e-15)


def test_straight_through_forward_and_gradient(rng):
    pre = ad.parameter(rng.normal(size=(3, 2)))
    q = ad.parameter(rng.normal(size=(3, 2)))
    st_ = ad.straight_through(pre, q)
    np.testing.assert_array_equal(st_.data, q.data)
    g = ad.backward(ad.sum(st_ * 2.0), [pre, q])
    np.testing.assert_array_equal(g[pre].data, np.full((3, 2), 2.0))
    np.testing.assert_array_equal(g[q].data, np.zeros((3, 2)))


# --------------------------------------------------------------------------
# finite-difference suite: 50 seeded inputs per op


def _positive(a):
    return np.abs(a) + 0.5


OPS = {
    "add": (lambda x, c: ad.sum(ad.add(x, Tensor(c)) * Tensor(c)), lambda r: r.normal(size=(3, 4))),
    "sub": (lambda x, c: ad.sum(ad.sub(Tensor(c), x) * Tensor(c)), lambda r: r.normal(size=(3, 4))),
    "mul": (lambda x, c: ad.sum(ad.mul(x, x) * Tensor(c)), lambda r: r.normal(size=(3, 4))),
    "broadcast_mul": (lambda x, c: ad.sum(ad.mul(x, Tensor(c)) * Tensor(c)), lambda r: r.normal(size=(1, 4))),
    "matmul": (lambda x, c: ad.sum(ad.matmul(x, Tensor(c.T)) * 0.7), lambda r: r.normal(size=(3, 4))),
    "batched_matmul": (lambda x, c: ad.sum(ad.square(ad.matmul(ad.reshape(x, (3, 1, 4)), Tensor(np.ones((4, 2)))))),
                       lambda r: r.normal(size=(3, 4))),
    "reshape": (lambda x, c: ad.sum(ad.reshape(x, (4, 3)) * Tensor(c.reshape(4, 3))), lambda r: r.normal(size=(3, 4))),
    "transpose": (lambda x, c: ad.sum(ad.transpose(x) * Tensor(c.T)), lambda r: r.normal(size=(3, 4))),
    "mean_over_axis": (lambda x, c: ad.sum(ad.square(ad.mean_over_axis(x, 1))), lambda r: r.normal(size=(3, 4))),
    "mean_tuple_axis": (lambda x, c: ad.sum(ad.square(ad.mean(ad.reshape(x, (1, 3, 2, 2)), axis=(1, 2)))),
                        lambda r: r.normal(size=(3, 4))),
    "relu": (lambda x, c: ad.sum(ad.relu(x) * Tensor(c)),
             lambda r: r.normal(size=(3, 4)) + np.sign(r.normal(size=(3, 4))) * 0.01),
    "exp": (lambda x, c: ad.sum(ad.exp(x) * Tensor(c)), lambda r: r.normal(size=(3, 4))),
    "sqrt": (lambda x, c: ad.sum(ad.sqrt(x) * Tensor(c)), lambda r: _positive(r.normal(size=(3, 4)))),
    "square": (lambda x, c: ad.sum(ad.square(x) * Tensor(c)), lambda r: r.normal(size=(3, 4))),
    "l2_norm": (lambda x, c: ad.sum(ad.l2_norm(x, axis=-1) * Tensor(c[:, 0])), lambda r: r.normal(size=(3, 4))),
    "concat": (lambda x, c: ad.sum(ad.square(ad.concat([x, x * 2.0], axis=0)) * Tensor(np.vstack([c, c]))),
               lambda r: r.normal(size=(3, 4))),
    "gather": (lambda x, c: ad.sum(ad.square(ad.gather(x, np.array([[0, 2], [2, 1]])))),
               lambda r: r.normal(size=(3, 4))),
    "neg_sum_mean": (lambda x, c: ad.mean(-x * Tensor(c)) + ad.sum(x, axis=0).sum(), lambda r: r.normal(size=(3, 4))),
}


def op_gradient_error(name, seed):
    f, sampler = OPS[name]
    r = np.random.default_rng([7, seed])
    x0 = sampler(r)
    c = r.normal(size=(3, 4))
    analytic = grad_of(lambda x: f(x, c), x0)
    numeric = ad.finite_diff_grad(lambda x: f(x, c), Tensor(x0)).data
    return rel_err(analytic, numeric)


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    worst = max(op_gradient_error(name, seed) for seed in range(50))
    assert worst < 1e-4, f"{name}: worst rel err {worst:.2e}"


# --------------------------------------------------------------------------
# serialization


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple),
              elements=st.floats(-1e6, 1e6)))
def test_serialization_round_trip(arr):
    buf = ad.tensor_to_bytes(Tensor(arr)) + ad.tensor_to_bytes(Tensor(arr * 2))
    first, off = ad.tensor_from_bytes(buf)
    second, end = ad.tensor_from_bytes(buf, off)
    assert end == len(buf)
    np.testing.assert_array_equal(first.data, arr)
    np.testing.assert_array_equal(second.data, arr * 2)


def test_serialization_header_layout():
    buf = ad.tensor_to_bytes(Tensor(np.zeros((2, 3))))
    assert buf[:8] == (2).to_bytes(8, "little")
    assert buf[8:24] == (2).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert len(buf) == 24 + 6 * 8
