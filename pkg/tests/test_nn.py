import numpy as np
import pytest

from tavq import autodiff as ad
from tavq.autodiff import GradMap, Tensor
from tavq.nn import AdamState, Fnn2, PatchMap, adam_step, depth_to_space, fnn2_apply, \
    patchify, space_to_depth, unpatchify

from conftest import rel_err


def zero_fnn(d_in, d_out):
    net = Fnn2(d_in, d_out, np.random.default_rng(0))
    for p in net.parameters().values():
        p.data[...] = 0.0
    return net


def test_zero_fnn_gives_zero():
    out = fnn2_apply(zero_fnn(3, 2), Tensor([1.0, -4.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_identity_fnn_applies_relu():
    net = zero_fnn(2, 2)
    net.W1.data[...] = np.eye(2)
    net.W2.data[...] = np.eye(2)
    np.testing.assert_array_equal(fnn2_apply(net, Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_fnn_matches_hand_rolled_oracle(rng):
    net = Fnn2(5, 3, rng, d_hid=7)
    for p in (net.b1, net.b2):
        p.data[...] = rng.normal(size=p.shape)
    x = rng.normal(size=5)
    hidden = np.zeros(7)
    for j in range(7):
        acc = net.b1.data[j]
        for i in range(5):
            acc += x[i] * net.W1.data[i, j]
        hidden[j] = acc if acc > 0 else 0.0
    expected = [net.b2.data[k] + sum(hidden[j] * net.W2.data[j, k] for j in range(7)) for k in range(3)]
    np.testing.assert_allclose(fnn2_apply(net, Tensor(x)).data, expected, rtol=1e-12)


def test_fnn_dimension_mismatch():
    with pytest.raises(ValueError):
        fnn2_apply(zero_fnn(3, 2), Tensor(np.ones(4)))


def test_fnn_default_hidden_width(rng):
    assert Fnn2(3, 8, rng).d_hid == 8 and Fnn2(9, 2, rng).d_hid == 9


def test_init_ranges(rng):
    net = Fnn2(16, 4, rng)
    assert np.abs(net.W1.data).max() <= 0.25 and np.abs(net.W2.data).max() <= 0.25
    assert not net.b1.data.any() and not net.b2.data.any()


def fnn2_gradient_error(seed):
    r = np.random.default_rng([11, seed])
    net = Fnn2(4, 3, r)
    for p in (net.b1, net.b2):
        p.data[...] = r.normal(size=p.shape) * 0.3
    x0 = r.normal(size=(6, 4))
    c = r.normal(size=(6, 3))
    x = ad.parameter(x0)
    params = list(net.parameters().values())
    g = ad.backward(ad.sum(fnn2_apply(net, x) * Tensor(c)), [x] + params)
    worst = rel_err(g[x].data, ad.finite_diff_grad(lambda v: ad.sum(fnn2_apply(net, v) * Tensor(c)),
                                                   Tensor(x0)).data)
    for p in params:
        saved = p.data.copy()

        def f(v, p=p, saved=saved):
            p.data[...] = v.data
            out = ad.sum(fnn2_apply(net, Tensor(x0)) * Tensor(c))
            p.data[...] = saved
            return out
        worst = max(worst, rel_err(g[p].data, ad.finite_diff_grad(f, Tensor(saved)).data))
    return worst


def test_fnn_gradients_all_parameters():
    assert max(fnn2_gradient_error(seed) for seed in range(20)) < 1e-4


# --------------------------------------------------------------------------
# patches


def test_patchify_shapes(rng):
    pm = PatchMap(4, 3, 16, rng)
    grid = patchify(Tensor(rng.normal(size=(32, 32, 3))), pm)
    assert grid.shape == (8, 8, 16)
    back = unpatchify(grid, PatchMap(4, 3, 16, rng, inverse=True))
    assert back.shape == (32, 32, 3)


def test_patchify_zero_image(rng):
    pm = PatchMap(4, 3, 16, rng)
    assert not patchify(Tensor(np.zeros((8, 8, 3))), pm).data.any()


def test_patchify_indivisible(rng):
    with pytest.raises(ValueError):
        patchify(Tensor(np.zeros((10, 8, 3))), PatchMap(4, 3, 8, rng))


def test_space_to_depth_inverse(rng):
    x = rng.normal(size=(2, 8, 12, 3))
    y = depth_to_space(space_to_depth(Tensor(x), 4), 4)
    np.testing.assert_array_equal(y.data, x)


def test_patch_locality(rng):
    pm = PatchMap(4, 3, 8, rng)
    x = rng.normal(size=(16, 16, 3))
    base = patchify(Tensor(x), pm).data
    for pr, pc in [(0, 0), (1, 2), (3, 3)]:
        y = x.copy()
        y[4 * pr:4 * pr + 4, 4 * pc:4 * pc + 4] += rng.normal(size=(4, 4, 3))
        changed = np.any(patchify(Tensor(y), pm).data != base, axis=-1)
        assert changed.sum() == 1 and changed[pr, pc]


# --------------------------------------------------------------------------
# Adam


def _grads(params, arrays):
    return GradMap({p: Tensor(a) for p, a in zip(params, arrays)})


def test_adam_zero_gradient_leaves_params():
    p = ad.parameter([1.0, -2.0])
    st = AdamState({"p": p})
    adam_step(st, _grads([p], [np.zeros(2)]))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.step == 1


def test_adam_first_step_magnitude():
    p = ad.parameter(np.zeros(4))
    st = AdamState({"p": p}, lr=1e-3)
    adam_step(st, _grads([p], [np.array([0.5, -3.0, 2e-3, 7.0])]))
    # first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    g = np.array([0.5, -3.0, 2e-3, 7.0])
    np.testing.assert_allclose(p.data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-14)
    assert np.all(np.abs(np.abs(p.data) - 1e-3) < 1e-8)


def test_adam_reduces_quadratic():
    p = ad.parameter([2.0, -1.0])
    st = AdamState({"p": p}, lr=0.1)
    loss = lambda: float((p.data ** 2).sum())   # noqa: E731
    before = loss()
    for _ in range(2):
        adam_step(st, _grads([p], [2 * p.data]))
    assert loss() < before


def test_adam_missing_gradient():
    p, q = ad.parameter([1.0]), ad.parameter([1.0])
    with pytest.raises(KeyError):
        adam_step(AdamState({"p": p, "q": q}), _grads([p], [np.ones(1)]))


def test_adam_order_invariance(rng):
    arrays = [rng.normal(size=(3,)) for _ in range(3)]
    results = []
    for order in ([0, 1, 2], [2, 0, 1]):
        params = [ad.parameter(np.ones(3)) for _ in range(3)]
        st = AdamState({f"p{i}": params[i] for i in order})
        for _ in range(3):
            adam_step(st, _grads([params[i] for i in order], [arrays[i] for i in order]))
        results.append([p.data.copy() for p in params])
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)
