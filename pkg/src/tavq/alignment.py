"""Sampling-based codebook/text alignment.

Each hierarchy level's quantized grid is summarised by a diagonal Gaussian
(two small networks over the grid's spatial mean). ``q`` reparameterized
samples from it are projected into text space and matched to ``q`` text
units drawn from the caption by an entropic transport plan. The plan is held
constant during differentiation: the gradient of the optimal transport cost
with respect to the cost matrix is the plan itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Fnn2
from .transport import default_eps, sinkhorn_batch

log = logging.getLogger(__name__)

GRANULARITIES = ("word", "phrase", "sentence")
LEVELS = ("f1", "f2", "f3")
# word <-> finest grid, sentence <-> coarsest grid
LEVEL_FOR = dict(zip(GRANULARITIES, LEVELS))


class GaussianHead:
    def __init__(self, d_z: int, d: int, rng: np.random.Generator):
        self.mu_net = Fnn2(d_z, d_z, rng)
        self.sigma_net = Fnn2(d_z, d_z, rng)
        self.pred_net = Fnn2(d_z, d, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, net in (("mu", self.mu_net), ("sigma", self.sigma_net), ("pred", self.pred_net)):
            out.update({f"{prefix}.{k}": v for k, v in net.parameters().items()})
        return out


@dataclass
class AlignmentConfig:
    q: int = 8
    eps: float | None = None      # None: eps_scale * mean(cost) per instance
    eps_scale: float = 0.05
    tol: float = 1e-6
    max_iter: int = 1000
    alpha: float = 0.001          # word
    beta_p: float = 0.001         # phrase
    gamma_s: float = 0.001        # sentence
    full_set: bool = False        # q = |units|, every unit used once

    def __post_init__(self):
        self.q = max(1, int(self.q))
        for name in ("alpha", "beta_p", "gamma_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def weight(self, granularity: str) -> float:
        return {"word": self.alpha, "phrase": self.beta_p, "sentence": self.gamma_s}[granularity]


def gaussian_head(grid: Tensor, head: GaussianHead) -> tuple[Tensor, Tensor]:
    """Mean and diagonal covariance from the spatial mean of a code grid.

    ``grid`` is (h, w, d_z) or batched (B, h, w, d_z).
    """
    if not np.isfinite(grid.data).all():
        raise ad.NonFiniteError("NaN in grid passed to gaussian_head")
    if grid.ndim not in (3, 4):
        raise ValueError(f"expected a (B,) h x w x d_z grid, got {grid.shape}")
    m = ad.mean(grid, axis=(-3, -2))
    return head.mu_net(m), ad.exp(head.sigma_net(m))


def sample_gaussian(mu: Tensor, sigma_diag: Tensor, q: int, rng: np.random.Generator) -> Tensor:
    """``mu + sqrt(sigma) * eta`` with standard normal ``eta``; (q, d) or (B, q, d)."""
    if q < 1:
        raise ValueError("sample count q must be >= 1")
    if (sigma_diag.data <= 0).any():
        raise ValueError("covariance entries must be positive")
    eta = rng.standard_normal(mu.shape[:-1] + (q, mu.shape[-1]))
    lead = mu.shape[:-1] + (1, mu.shape[-1])
    return mu.reshape(lead) + ad.sqrt(sigma_diag).reshape(lead) * eta


def sample_targets(units: np.ndarray, q: int, rng: np.random.Generator) -> np.ndarray:
    """``q`` uniform draws with replacement from the rows of ``units``."""
    units = np.asarray(units, dtype=np.float64)
    if units.ndim != 2 or units.shape[0] == 0:
        raise ValueError("cannot sample targets from an empty unit set")
    return units[rng.integers(0, units.shape[0], size=q)]


@dataclass
class AlignmentResult:
    loss: Tensor
    plans: list[np.ndarray]       # one plan per image, batch order
    costs: list[np.ndarray]
    converged: bool


def align(grid: Tensor, units, head: GaussianHead, cfg: AlignmentConfig,
          rng: np.random.Generator, plans: list[np.ndarray] | None = None) -> AlignmentResult:
    """Batched alignment loss; mean over images of <cost, plan>.

    ``units`` is one (n_b, d) array per image (a single array for an unbatched
    grid). Passing ``plans`` reuses fixed plans instead of solving, which is
    how the detached-plan objective is probed by finite differences.
    """
    single = grid.ndim == 3
    if single:
        grid = grid.reshape((1,) + grid.shape)
        units = [units]
    B = grid.shape[0]
    if len(units) != B:
        raise ValueError(f"{len(units)} unit sets for a batch of {B} grids")
    units = [np.asarray(u, dtype=np.float64) for u in units]
    for u in units:
        if u.ndim != 2 or u.shape[0] == 0:
            raise ValueError("every image needs a non-empty unit set")

    mu, sigma = gaussian_head(grid, head)

    targets = []
    for u in units:
        targets.append(u if cfg.full_set else sample_targets(u, cfg.q, rng))
    groups: dict[int, list[int]] = {}
    for b, t in enumerate(targets):
        groups.setdefault(t.shape[0], []).append(b)

    out_plans: list[np.ndarray | None] = [None] * B
    out_costs: list[np.ndarray | None] = [None] * B
    total = None
    converged = True
    for n, members in groups.items():
        idx = np.array(members)
        mu_g = ad.gather(mu, idx) if len(members) < B else mu
        sig_g = ad.gather(sigma, idx) if len(members) < B else sigma
        xi = sample_gaussian(mu_g, sig_g, n, rng)                      # (G, n, d_z)
        y_pre = head.pred_net(xi)                                       # (G, n, d)
        y_tar = np.stack([targets[b] for b in members])                 # (G, n, d)
        G, d = len(members), y_pre.shape[-1]
        diff = y_pre.reshape(G, n, 1, d) - y_tar.reshape(G, 1, n, d)
        cost = ad.l2_norm(diff, axis=-1)                                # (G, n, n)
        if plans is None:
            eps = cfg.eps if cfg.eps is not None else default_eps(cost.data, cfg.eps_scale)
            uniform = np.full(n, 1.0 / n)
            plan, iters, ok = sinkhorn_batch(uniform, uniform, cost.data, eps,
                                             tol=cfg.tol, max_iter=cfg.max_iter)
            if not ok:
                converged = False
                log.warning("sinkhorn stopped after %d iterations without converging; "
                            "using the last iterate", iters)
        else:
            plan = np.stack([plans[b] for b in members])
        term = ad.sum(cost * plan)
        total = term if total is None else total + term
        for k, b in enumerate(members):
            out_plans[b] = plan[k]
            out_costs[b] = cost.data[k]
    loss = total * (1.0 / B)
    return AlignmentResult(loss=loss, plans=out_plans, costs=out_costs, converged=converged)


def granularity_loss(grid: Tensor, units, head: GaussianHead, cfg: AlignmentConfig,
                     rng: np.random.Generator, plans: list[np.ndarray] | None = None) -> Tensor:
    return align(grid, units, head, cfg, rng, plans).loss


def total_loss(l_vq: Tensor, l_w: Tensor, l_p: Tensor, l_s: Tensor, cfg: AlignmentConfig) -> Tensor:
    return l_vq + cfg.alpha * l_w + cfg.beta_p * l_p + cfg.gamma_s * l_s


# --------------------------------------------------------------------------
# codebook / text similarity


def max_cosine(projected: np.ndarray, units: np.ndarray) -> np.ndarray:
    """For each unit row, the best cosine against any projected entry."""
    p = projected / np.maximum(np.linalg.norm(projected, axis=1, keepdims=True), 1e-300)
    u = units / np.maximum(np.linalg.norm(units, axis=1, keepdims=True), 1e-300)
    return (u @ p.T).max(axis=1)


def codebook_text_similarity(entries, heads: dict[str, GaussianHead],
                             units_by_granularity: dict[str, list[np.ndarray]]) -> float:
    """Mean over all text units of the max cosine to codebook entries projected
    through that granularity's prediction network.

    ``entries`` is one (K, d_z) array, or a dict of arrays keyed by level.
    """
    scores = []
    for gran, unit_sets in units_by_granularity.items():
        pooled = [u for u in unit_sets if len(u)]
        if not pooled:
            continue
        head = heads[LEVEL_FOR[gran]]
        table = entries[LEVEL_FOR[gran]] if isinstance(entries, dict) else entries
        projected = head.pred_net(Tensor(table)).data
        scores.append(max_cosine(projected, np.concatenate(pooled, axis=0)))
    if not scores:
        raise ValueError("no caption units to compare against")
    return float(np.concatenate(scores).mean())
