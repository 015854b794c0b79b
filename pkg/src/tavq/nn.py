"""Layers, the two-layer ReLU network, patch maps and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradMap, Tensor


def uniform_init(rng: np.random.Generator, d_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map ``x @ W + b`` over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in, self.d_out = d_in, d_out
        self.W = ad.parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.b = ad.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects last extent {self.d_in}, got {x.shape}")
        return ad.matmul(x, self.W) + self.b

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


class Fnn2:
    """Two affine layers with a ReLU between them; output layer stays affine."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, d_hid: int | None = None):
        d_hid = max(d_in, d_out) if d_hid is None else d_hid
        self.d_in, self.d_hid, self.d_out = d_in, d_hid, d_out
        self.W1 = ad.parameter(uniform_init(rng, d_in, (d_in, d_hid)))
        self.b1 = ad.parameter(np.zeros(d_hid))
        self.W2 = ad.parameter(uniform_init(rng, d_hid, (d_hid, d_out)))
        self.b2 = ad.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return fnn2_apply(self, x)

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def fnn2_apply(params: Fnn2, x: Tensor) -> Tensor:
    """``relu(x @ W1 + b1) @ W2 + b2``, broadcast over leading axes of ``x``."""
    if x.shape[-1] != params.d_in:
        raise ValueError(f"Fnn2 expects input dimension {params.d_in}, got {x.shape[-1]}")
    hidden = ad.relu(ad.matmul(x, params.W1) + params.b1)
    return ad.matmul(hidden, params.W2) + params.b2


# --------------------------------------------------------------------------
# patch grids


def space_to_depth(x: Tensor, p: int) -> Tensor:
    """(B, H, W, C) -> (B, H/p, W/p, p*p*C), one output cell per p x p block."""
    B, H, W, C = x.shape
    if H % p or W % p:
        raise ValueError(f"extents {H}x{W} not divisible by patch factor {p}")
    y = x.reshape(B, H // p, p, W // p, p, C)
    y = y.transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(B, H // p, W // p, p * p * C)


def depth_to_space(x: Tensor, p: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    B, h, w, D = x.shape
    if D % (p * p):
        raise ValueError(f"channel extent {D} not divisible by {p}x{p}")
    C = D // (p * p)
    y = x.reshape(B, h, w, p, p, C)
    y = y.transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(B, h * p, w * p, C)


class PatchMap:
    """Non-overlapping p x p patches linearly projected to (or from) ``d_z``.

    Used forward as a patch embedding (channels -> d_z) and, with
    ``inverse=True``, as a patch expansion (d_z -> p*p*channels).
    """

    def __init__(self, factor: int, channels: int, d_z: int, rng: np.random.Generator,
                 inverse: bool = False):
        if factor < 1:
            raise ValueError("patch factor must be >= 1")
        self.factor, self.channels, self.d_z, self.inverse = factor, channels, d_z, inverse
        flat = factor * factor * channels
        self.proj = Linear(d_z, flat, rng) if inverse else Linear(flat, d_z, rng)

    def parameters(self) -> dict[str, Tensor]:
        return self.proj.parameters()


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")
    return x, False


def patchify(image: Tensor, pmap: PatchMap) -> Tensor:
    x, single = _batched(image)
    if x.shape[-1] != pmap.channels:
        raise ValueError(f"patchify expects {pmap.channels} channels, got {x.shape[-1]}")
    out = pmap.proj(space_to_depth(x, pmap.factor))
    return out.reshape(out.shape[1:]) if single else out


def unpatchify(grid: Tensor, pmap: PatchMap) -> Tensor:
    x, single = _batched(grid)
    if x.shape[-1] != pmap.d_z:
        raise ValueError(f"unpatchify expects {pmap.d_z} channels, got {x.shape[-1]}")
    out = depth_to_space(pmap.proj(x), pmap.factor)
    return out.reshape(out.shape[1:]) if single else out


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))


def adam_step(state: AdamState, grads: GradMap) -> None:
    """One bias-corrected Adam update, in place on ``state.params``."""
    missing = [name for name, p in state.params.items() if p not in grads]
    if missing:
        raise KeyError(f"no gradient for registered parameter(s): {', '.join(sorted(missing))}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(state.params):
        p = state.params[name]
        g = grads[p].data
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
