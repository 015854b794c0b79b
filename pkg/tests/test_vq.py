import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tavq import autodiff as ad
from tavq.autodiff import Tensor
from tavq.vq import Codebook, codebook_metrics, nearest_indices, quantization_terms, quantize, vq_loss

from conftest import rel_err


def two_point_book():
    return Codebook(2, 2, entries=np.array([[0.0, 0.0], [1.0, 1.0]]))


def test_nearest_code():
    assert quantize(Tensor([[[0.2, 0.1]]]), two_point_book()).indices[0, 0] == 0


def test_tie_goes_to_lowest_index():
    assert quantize(Tensor([[[0.5, 0.5]]]), two_point_book()).indices[0, 0] == 0


def test_indices_match_exhaustive_scan(rng):
    for _ in range(20):
        grid = rng.normal(size=(4, 4, 2))
        cb = Codebook(3, 2, rng)
        cb.entries.data[...] = rng.normal(size=(3, 2))
        got = quantize(Tensor(grid), cb).indices
        for r in range(4):
            for c in range(4):
                dists = [math.dist(grid[r, c], e) for e in cb.entries.data]
                assert got[r, c] == dists.index(min(dists))


def test_quantized_rows_are_entries(rng):
    cb = Codebook(5, 3, rng)
    res = quantize(Tensor(rng.normal(size=(2, 3, 3))), cb)
    np.testing.assert_array_equal(res.quantized.data, cb.entries.data[res.indices])
    np.testing.assert_array_equal(res.ste.data, res.quantized.data)


def test_quantize_idempotent_on_entries(rng):
    cb = Codebook(6, 4, rng)
    idx = quantize(Tensor(cb.entries.data.reshape(1, 6, 4)), cb).indices
    np.testing.assert_array_equal(idx.reshape(-1), np.arange(6))


def test_quantize_errors(rng):
    cb = Codebook(3, 2, rng)
    with pytest.raises(ValueError):
        quantize(Tensor(np.zeros((2, 2, 3))), cb)
    with pytest.raises(ValueError):
        Codebook(1, 2, rng)
    with pytest.raises(ValueError):
        nearest_indices(np.zeros((1, 2)), np.zeros((0, 2)))


def test_codebook_init_range(rng):
    cb = Codebook(64, 8, rng)
    assert np.abs(cb.entries.data).max() <= 1 / 64


def test_vq_loss_zero():
    x = Tensor(np.ones((2, 2)))
    q = Tensor(np.full((3,), 0.3))
    assert vq_loss(x, x, q, q).item() == 0.0


def test_vq_loss_hand_value():
    val = vq_loss(Tensor([1.0]), Tensor([0.0]), Tensor([2.0]), Tensor([1.0]), 0.25)
    assert val.item() == 2.25


def test_vq_loss_shape_mismatch():
    with pytest.raises(ValueError):
        vq_loss(Tensor([1.0]), Tensor([1.0, 2.0]), Tensor([1.0]), Tensor([1.0]))


def test_codebook_term_gradient_routing(rng):
    pre = ad.parameter(rng.normal(size=(4, 3)))
    entries = ad.parameter(rng.normal(size=(4, 3)))
    g = ad.backward(quantization_terms(pre, entries, 0.0), [pre, entries])
    assert not g[pre].data.any()          # codebook term: stop-gradient on pre_q
    assert g[entries].data.any()
    g = ad.backward(quantization_terms(pre, entries, 1.0) - quantization_terms(pre.detach(), entries, 0.0),
                    [pre, entries])
    assert g[pre].data.any()
    np.testing.assert_allclose(g[entries].data, 0.0, atol=1e-15)


def vq_loss_gradient_error(seed, commit=0.25):
    """Reconstruction input by finite differences; the stop-gradient inputs
    against their closed forms, since a finite difference of the value would
    also move the operand that backward holds constant."""
    r = np.random.default_rng([4, seed])
    x, x_rec0 = r.normal(size=(4, 4, 3)), r.normal(size=(4, 4, 3))
    pre0, q0 = r.normal(size=(2, 2, 5)), r.normal(size=(2, 2, 5))
    x_rec, pre, q = ad.parameter(x_rec0), ad.parameter(pre0), ad.parameter(q0)
    g = ad.backward(vq_loss(Tensor(x), x_rec, pre, q, commit), [x_rec, pre, q])
    numeric = ad.finite_diff_grad(lambda v: vq_loss(Tensor(x), v, Tensor(pre0), Tensor(q0), commit),
                                  Tensor(x_rec0)).data
    worst = rel_err(g[x_rec].data, numeric)
    worst = max(worst, rel_err(g[pre].data, 2 * commit * (pre0 - q0) / pre0.size))
    worst = max(worst, rel_err(g[q].data, 2 * (q0 - pre0) / q0.size))
    # with the detached operands pinned, each term is smooth in its live input
    commit_only = ad.finite_diff_grad(lambda v: ad.mean(ad.square(v - Tensor(q0))), Tensor(pre0)).data
    book_only = ad.finite_diff_grad(lambda v: ad.mean(ad.square(Tensor(pre0) - v)), Tensor(q0)).data
    worst = max(worst, rel_err(g[pre].data, commit * commit_only), rel_err(g[q].data, book_only))
    return worst


def test_vq_loss_gradients():
    assert max(vq_loss_gradient_error(seed) for seed in range(20)) < 1e-4


def ste_matches_plain(seed):
    r = np.random.default_rng([3, seed])
    cb = Codebook(5, 3, r)
    pre = ad.parameter(r.normal(size=(2, 2, 3)))
    w = r.normal(size=(3, 4))
    res = quantize(pre, cb)
    g_ste = ad.backward(ad.sum(ad.relu(res.ste @ Tensor(w))), [pre])[pre].data
    plain = ad.parameter(res.quantized.data)
    g_plain = ad.backward(ad.sum(ad.relu(plain @ Tensor(w))), [plain])[plain].data
    return np.array_equal(g_ste, g_plain) and g_ste.tobytes() == g_plain.tobytes()


def test_ste_gradient_equals_identity_path():
    assert all(ste_matches_plain(seed) for seed in range(20))


def test_metrics_uniform():
    m = codebook_metrics(np.arange(8).repeat(3), 8)
    assert m["usage_fraction"] == 1.0 and abs(m["perplexity"] - 8.0) < 1e-12


def test_metrics_single_code():
    m = codebook_metrics(np.full(10, 3), 8)
    assert m["perplexity"] == 1.0 and m["usage_fraction"] == 1 / 8


def test_metrics_counts_211():
    m = codebook_metrics([0, 0, 1, 2], 4)
    assert abs(m["perplexity"] - 2 ** 1.5) < 1e-12
    assert m["usage_fraction"] == 0.75


def test_metrics_out_of_range():
    with pytest.raises(ValueError):
        codebook_metrics([0, 4], 4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=60))
def test_perplexity_bounds(indices):
    m = codebook_metrics(indices, 10)
    assert 1.0 - 1e-12 <= m["perplexity"] <= len(set(indices)) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vq_loss_non_negative(seed):
    r = np.random.default_rng(seed)
    a, b, c, d = (Tensor(r.normal(size=(3, 2))) for _ in range(4))
    assert vq_loss(a, b, c, d, float(r.uniform(0, 2))).item() >= 0.0
