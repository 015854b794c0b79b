"""Hierarchical patch encoder/decoder, parameter registry and the training step."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignment import GRANULARITIES, LEVEL_FOR, LEVELS, AlignmentConfig, GaussianHead, \
    align, codebook_text_similarity, total_loss
from .autodiff import Tensor
from .config import RunConfig
from .nn import AdamState, Fnn2, PatchMap, adam_step, patchify, unpatchify
from .text import GranularText
from .vq import Codebook, QuantizeResult, codebook_metrics, quantization_terms, quantize


class NumericalAbort(FloatingPointError):
    """A loss term went non-finite; ``term`` names the first one."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite value in {term}" + (f": {detail}" if detail else ""))


def _prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def _ratios(factors) -> tuple[int, int, int]:
    f1, f2, f3 = factors
    if f2 % f1 or f3 % f2:
        raise ValueError(f"factors {list(factors)} must each divide the next")
    return f1, f2 // f1, f3 // f2


# --------------------------------------------------------------------------
# encoder / decoder


class HierEncoder:
    """Patch stem at the finest factor, then two grid merges; each stage adds
    a cellwise residual Fnn2."""

    def __init__(self, factors, d_z: int, rng: np.random.Generator, channels: int = 3):
        self.factors = tuple(int(f) for f in factors)
        f1, r1, r2 = _ratios(self.factors)
        self.d_z, self.channels = d_z, channels
        self.stem = PatchMap(f1, channels, d_z, rng)
        self.merge1 = PatchMap(r1, d_z, d_z, rng)
        self.merge2 = PatchMap(r2, d_z, d_z, rng)
        self.mix = [Fnn2(d_z, d_z, rng) for _ in range(3)]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, mod in (("stem", self.stem), ("merge1", self.merge1), ("merge2", self.merge2)):
            out.update(_prefixed(name, mod.parameters()))
        for j, net in enumerate(self.mix, 1):
            out.update(_prefixed(f"mix{j}", net.parameters()))
        return out


def encode_hier(image: Tensor, enc: HierEncoder) -> list[Tensor]:
    """Three pre-quantization grids, finest first; each level feeds the next."""
    H, W = image.shape[-3], image.shape[-2]
    f3 = enc.factors[2]
    if H % f3 or W % f3:
        raise ValueError(f"image extents {H}x{W} are not divisible by {f3}")
    x = patchify(image, enc.stem)
    z1 = x + enc.mix[0](x)
    x = patchify(z1, enc.merge1)
    z2 = x + enc.mix[1](x)
    x = patchify(z2, enc.merge2)
    z3 = x + enc.mix[2](x)
    return [z1, z2, z3]


class Decoder:
    """Mirror of :class:`HierEncoder`, reading only the coarsest grid."""

    def __init__(self, factors, d_z: int, rng: np.random.Generator, channels: int = 3):
        self.factors = tuple(int(f) for f in factors)
        f1, r1, r2 = _ratios(self.factors)
        self.d_z = d_z
        self.mix = [Fnn2(d_z, d_z, rng) for _ in range(3)]
        self.split2 = PatchMap(r2, d_z, d_z, rng, inverse=True)
        self.split1 = PatchMap(r1, d_z, d_z, rng, inverse=True)
        self.out = PatchMap(f1, channels, d_z, rng, inverse=True)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for j, net in enumerate(self.mix, 1):
            out.update(_prefixed(f"mix{j}", net.parameters()))
        for name, mod in (("split2", self.split2), ("split1", self.split1), ("out", self.out)):
            out.update(_prefixed(name, mod.parameters()))
        return out


def decode(z3: Tensor, dec: Decoder) -> Tensor:
    if z3.shape[-1] != dec.d_z:
        raise ValueError(f"decoder expects {dec.d_z} channels, got {z3.shape}")
    y = z3 + dec.mix[2](z3)
    y = unpatchify(y, dec.split2)
    y = y + dec.mix[1](y)
    y = unpatchify(y, dec.split1)
    y = y + dec.mix[0](y)
    return unpatchify(y, dec.out)


# --------------------------------------------------------------------------
# full model


@dataclass
class CodeGrids:
    pre: list[Tensor]
    quant: list[QuantizeResult]
    factors: tuple[int, int, int]


class TAVQModel:
    """Encoder, shared codebook, decoder and one Gaussian head per level."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.encoder = HierEncoder(cfg.factors, cfg.d_z, rng)
        self.codebook = Codebook(cfg.K, cfg.d_z, rng)
        # optional separate codebooks for the two finer levels; the shared one serves f3
        self.level_codebooks = [Codebook(cfg.K, cfg.d_z, rng) for _ in range(2)] \
            if cfg.per_level_codebooks else []
        self.decoder = Decoder(cfg.factors, cfg.d_z, rng)
        self.heads = {lvl: GaussianHead(cfg.d_z, cfg.d, rng) for lvl in LEVELS}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"codebook.entries": self.codebook.entries}
        for lvl, cb in zip(LEVELS, self.level_codebooks):
            out[f"codebook.{lvl}.entries"] = cb.entries
        out.update(_prefixed("enc", self.encoder.parameters()))
        out.update(_prefixed("dec", self.decoder.parameters()))
        for lvl, head in self.heads.items():
            out.update(_prefixed(f"head.{lvl}", head.parameters()))
        for name, p in out.items():
            p.name = name
        return out

    def codebook_for(self, level: int) -> Codebook:
        """Codebook used at level 0, 1 or 2 (finest first)."""
        return self.level_codebooks[level] if level < len(self.level_codebooks) else self.codebook

    def grids(self, images: Tensor) -> CodeGrids:
        pre = encode_hier(images, self.encoder)
        return CodeGrids(pre=pre, quant=[quantize(z, self.codebook_for(j)) for j, z in enumerate(pre)],
                         factors=self.encoder.factors)

    def reconstruct(self, grids: CodeGrids) -> Tensor:
        return decode(grids.quant[2].ste, self.decoder)


def alignment_config(cfg: RunConfig) -> AlignmentConfig:
    return AlignmentConfig(q=cfg.q, eps=cfg.eps, eps_scale=cfg.eps_scale, tol=cfg.tol,
                           max_iter=cfg.max_iter, alpha=cfg.alpha, beta_p=cfg.beta_p,
                           gamma_s=cfg.gamma_s, full_set=cfg.full_set)


@dataclass
class TrainState:
    model: TAVQModel
    adam: AdamState
    config: RunConfig
    step: int = 0

    @classmethod
    def create(cls, cfg: RunConfig) -> "TrainState":
        model = TAVQModel(cfg, np.random.default_rng([cfg.seed, 0]))
        adam = AdamState(model.named_parameters(), lr=cfg.lr, beta1=cfg.adam_beta1,
                         beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        return cls(model=model, adam=adam, config=cfg)

    def step_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 1, self.step])


def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Images for a given step; a pure function of (seed, step) so resumes line up."""
    return np.sort(np.random.default_rng([seed, 2, step]).choice(n, size=batch, replace=False))


# --------------------------------------------------------------------------
# objective


@dataclass
class Losses:
    total: Tensor
    l_vq: Tensor
    recon: Tensor
    terms: dict[str, Tensor]      # l_w, l_p, l_s
    grids: CodeGrids
    x_rec: Tensor
    plans: dict[str, list[np.ndarray]]


def _guard(term: str, fn):
    try:
        out = fn()
    except ad.NonFiniteError as exc:
        raise NumericalAbort(term, str(exc)) from exc
    vals = out.data if isinstance(out, Tensor) else None
    if vals is not None and not np.isfinite(vals).all():
        raise NumericalAbort(term)
    return out


def compute_losses(model: TAVQModel, images: np.ndarray, texts: list[GranularText],
                   cfg: RunConfig, rng: np.random.Generator,
                   plans: dict[str, list[np.ndarray]] | None = None) -> Losses:
    """Every term of the objective for one batch.

    ``plans`` (keyed l_w/l_p/l_s) replaces the transport solves with fixed
    plans, which turns the objective into a smooth function for gradient checks.
    """
    if len(texts) != len(images) or len(images) == 0:
        raise ValueError("need one caption bundle per image and a non-empty batch")
    for t in texts:
        if min(t.counts()) == 0:
            raise ValueError(f"caption bundle has an empty granularity: {t.counts()}")
    x = Tensor(images)
    pre = _guard("encoder", lambda: encode_hier(x, model.encoder))
    quant = [_guard(f"quantize_f{j + 1}", lambda j=j, z=z: quantize(z, model.codebook_for(j)))
             for j, z in enumerate(pre)]
    grids = CodeGrids(pre=pre, quant=quant, factors=model.encoder.factors)
    x_rec = _guard("decoder", lambda: model.reconstruct(grids))
    recon = _guard("reconstruction", lambda: ad.mean(ad.square(x - x_rec)))
    levels = range(3) if cfg.vq_all_levels else (2,)
    l_vq = recon
    for j in levels:
        l_vq = l_vq + _guard(f"quantization_f{j + 1}",
                             lambda j=j: quantization_terms(pre[j], quant[j].quantized, cfg.commit_coeff))
    acfg = alignment_config(cfg)
    terms, used = {}, {}
    for gran, key in zip(GRANULARITIES, ("l_w", "l_p", "l_s")):
        lvl = LEVEL_FOR[gran]
        j = LEVELS.index(lvl)
        units = [t.units(gran) for t in texts]
        fixed = plans[key] if plans is not None else None
        res = _guard(key, lambda j=j, units=units, lvl=lvl, fixed=fixed: align(
            quant[j].quantized, units, model.heads[lvl], acfg, rng, fixed))
        terms[key], used[key] = _guard(key, lambda: res.loss), res.plans
    total = _guard("total", lambda: total_loss(l_vq, terms["l_w"], terms["l_p"], terms["l_s"], acfg))
    return Losses(total=total, l_vq=l_vq, recon=recon, terms=terms, grids=grids, x_rec=x_rec,
                  plans=used)


def train_step(state: TrainState, images: np.ndarray, texts: list[GranularText]) -> dict:
    """One optimizer step on the given batch; returns the metrics record."""
    t0 = time.perf_counter()
    cfg = state.config
    losses = compute_losses(state.model, images, texts, cfg, state.step_rng())
    params = state.adam.params
    grads = _guard("gradients", lambda: ad.backward(losses.total, params.values()))
    adam_step(state.adam, grads)
    state.step += 1
    record = {
        "step": state.step,
        "total": losses.total.item(),
        "l_vq": losses.l_vq.item(),
        "l_w": losses.terms["l_w"].item(),
        "l_p": losses.terms["l_p"].item(),
        "l_s": losses.terms["l_s"].item(),
        "recon_mse": losses.recon.item(),
    }
    for lvl, q in zip(LEVELS, losses.grids.quant):
        record[f"perplexity_{lvl}"] = codebook_metrics(q.indices, cfg.K)["perplexity"]
    record["step_ms"] = (time.perf_counter() - t0) * 1e3
    return record


# --------------------------------------------------------------------------
# evaluation


def encode_indices(model: TAVQModel, images: np.ndarray, chunk: int = 64) -> tuple[list[np.ndarray], float]:
    """Code indices per level and reconstruction MSE over a set of images."""
    per_level: list[list[np.ndarray]] = [[], [], []]
    sq, count = 0.0, 0
    for start in range(0, len(images), chunk):
        x = Tensor(images[start:start + chunk])
        grids = model.grids(x)
        rec = model.reconstruct(grids).data
        sq += float(((x.data - rec) ** 2).sum())
        count += x.data.size
        for j in range(3):
            per_level[j].append(grids.quant[j].indices)
    return [np.concatenate(p) for p in per_level], sq / max(count, 1)


def text_similarity(model: TAVQModel, texts: list[GranularText]) -> float:
    if not texts:
        raise ValueError("no captions to evaluate similarity against")
    units = {g: [t.units(g) for t in texts] for g in GRANULARITIES}
    entries = {lvl: model.codebook_for(j).entries.data for j, lvl in enumerate(LEVELS)}
    return codebook_text_similarity(entries, model.heads, units)
