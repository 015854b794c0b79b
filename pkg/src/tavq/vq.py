"""Codebook, nearest-code quantizer, VQ objective and usage metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Codebook:
    """K learnable entries of dimension d_z."""

    def __init__(self, K: int, d_z: int, rng: np.random.Generator | None = None,
                 entries: np.ndarray | None = None):
        if entries is None:
            if rng is None:
                raise ValueError("Codebook needs either entries or an rng")
            entries = rng.uniform(-1.0 / K, 1.0 / K, size=(K, d_z))
        entries = np.asarray(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape != (K, d_z):
            raise ValueError(f"codebook entries must have shape ({K}, {d_z}), got {entries.shape}")
        if K < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.K, self.d_z = K, d_z
        self.entries = ad.parameter(entries, name="codebook.entries")

    def parameters(self) -> dict[str, Tensor]:
        return {"entries": self.entries}


@dataclass
class QuantizeResult:
    indices: np.ndarray   # integer grid, shape of the input without the last axis
    quantized: Tensor     # rows of the codebook; gradient reaches the entries
    ste: Tensor           # quantized values, gradient routed to the pre-quantization grid


def nearest_indices(features: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """argmin_k ||f - e_k||_2 per row; ties resolve to the lowest k."""
    if entries.shape[0] == 0:
        raise ValueError("empty codebook")
    flat = features.reshape(-1, features.shape[-1])
    # exact squared distances; the expanded ||f||^2 - 2 f.e + ||e||^2 form can reorder near-ties
    d2 = ((flat[:, None, :] - entries[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1).reshape(features.shape[:-1])


def quantize(grid: Tensor, cb: Codebook) -> QuantizeResult:
    if grid.shape[-1] != cb.d_z:
        raise ValueError(f"grid last extent {grid.shape[-1]} != codebook dimension {cb.d_z}")
    if not np.isfinite(grid.data).all():
        raise ad.NonFiniteError("NaN in grid passed to quantize")
    idx = nearest_indices(grid.data, cb.entries.data)
    quantized = ad.gather(cb.entries, idx)
    return QuantizeResult(indices=idx, quantized=quantized,
                          ste=ad.straight_through(grid, quantized))


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return ad.mean(ad.square(a - b))


def quantization_terms(pre_q: Tensor, quantized: Tensor, commit_coeff: float) -> Tensor:
    """Codebook term plus weighted commitment term, each mean-reduced."""
    if pre_q.shape != quantized.shape:
        raise ValueError(f"pre_q {pre_q.shape} and quantized {quantized.shape} differ in shape")
    codebook_term = _mse(pre_q.detach(), quantized)
    commitment = _mse(pre_q, quantized.detach())
    return codebook_term + commit_coeff * commitment


def vq_loss(x: Tensor, x_rec: Tensor, pre_q: Tensor, quantized: Tensor,
            commit_coeff: float = 0.25) -> Tensor:
    """Reconstruction + codebook + commitment, all mean squared errors."""
    if x.shape != x_rec.shape:
        raise ValueError(f"x {x.shape} and x_rec {x_rec.shape} differ in shape")
    return _mse(x, x_rec) + quantization_terms(pre_q, quantized, commit_coeff)


def codebook_metrics(indices, K: int) -> dict[str, float]:
    idx = np.asarray(indices).reshape(-1)
    if idx.size == 0:
        raise ValueError("no indices to summarize")
    if idx.min() < 0 or idx.max() >= K:
        raise ValueError(f"index out of range 0..{K - 1}")
    counts = np.bincount(idx, minlength=K)
    p = counts[counts > 0] / idx.size
    entropy = float(-(p * np.log(p)).sum())
    return {"usage_fraction": float((counts > 0).sum()) / K,
            "perplexity": float(np.exp(entropy))}
